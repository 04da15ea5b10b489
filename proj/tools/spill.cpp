/**
 * Copyright 2026 The Spill Detection Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Command-line front end: capture, calibration and fusion, dataset
// management, training, evaluation, serving and synthetic data.
#include <algorithm>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "spill/dataset.hpp"
#include "spill/errors.hpp"
#include "spill/eval.hpp"
#include "spill/frame_sources.hpp"
#include "spill/geometry.hpp"
#include "spill/service.hpp"
#include "spill/synth.hpp"
#include "spill/timefmt.hpp"
#include "spill/train.hpp"
#include "spill/weights.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace spill {
namespace {

Modality modality_arg(const std::string& text) {
  const auto m = parse_modality(text);
  if (!m) throw Error(Errc::invalid_argument, "unknown modality '" + text + "'");
  return *m;
}

ClassLabel label_arg(const std::string& text) {
  const auto c = parse_class_label(text);
  if (!c) throw Error(Errc::invalid_argument, "unknown class label '" + text + "' (spill or no_spill)");
  return *c;
}

Size size_arg(const std::string& text) {
  int w = 0;
  int h = 0;
  char x = 0;
  std::istringstream in(text);
  if (!(in >> w >> x >> h) || x != 'x' || w < 1 || h < 1) {
    throw Error(Errc::invalid_argument, "expected WxH, got '" + text + "'");
  }
  return {w, h};
}

CropRect crop_arg(const std::string& text) {
  CropRect r;
  char c1 = 0;
  char c2 = 0;
  char c3 = 0;
  std::istringstream in(text);
  if (!(in >> r.x >> c1 >> r.y >> c2 >> r.w >> c3 >> r.h) || c1 != ',' || c2 != ',' || c3 != ',') {
    throw Error(Errc::invalid_argument, "expected x,y,w,h, got '" + text + "'");
  }
  return r;
}

/// --model accepts a training output directory or the weights file itself.
fs::path model_file(const fs::path& model) { return fs::is_directory(model) ? model / "model.weights" : model; }

fs::path default_out_dir(const fs::path& model) { return fs::is_directory(model) ? model : model.parent_path(); }

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw Error(Errc::write_failure, "cannot write " + path.string());
}

std::string new_session_id() {
  std::string id = iso8601_utc();
  std::replace_if(id.begin(), id.end(), [](char c) { return c == ':' || c == '.'; }, '-');
  return "session-" + id;
}

std::vector<fs::path> png_files(const fs::path& dir) {
  std::vector<fs::path> out;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw Error(Errc::missing_file, "no directory " + dir.string());
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---- subcommands ------------------------------------------------------------

void add_capture(CLI::App& app) {
  auto* cmd = app.add_subcommand("capture", "Capture synchronized thermal/RGB pairs into the dataset layout");
  struct Opts {
    std::string thermal, rgb, room, liquid, label, session;
    fs::path out;
    std::int64_t max_skew = kDefaultMaxSkewMs;
    int count = 1;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--thermal", o->thermal, "sim:<seed> | replay:<dir> | dev:<id>")->required();
  cmd->add_option("--rgb", o->rgb, "sim:<seed> | replay:<dir> | dev:<id>")->required();
  cmd->add_option("--room", o->room)->required();
  cmd->add_option("--liquid", o->liquid)->required();
  cmd->add_option("--label", o->label, "spill | no_spill")->required();
  cmd->add_option("--out", o->out, "dataset root")->required();
  cmd->add_option("--max-skew-ms", o->max_skew)->capture_default_str();
  cmd->add_option("--count", o->count, "pairs to capture")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--session", o->session, "session id (default: timestamp)");
  cmd->callback([o] {
    auto thermal = open_source(parse_source_descriptor(o->thermal, Modality::thermal));
    auto rgb = open_source(parse_source_descriptor(o->rgb, Modality::rgb));
    SessionMeta meta{o->session.empty() ? new_session_id() : o->session, o->room, o->liquid, label_arg(o->label)};
    check_session_meta(meta);
    PairWriter writer(o->out);
    for (int i = 0; i < o->count; ++i) {
      const FramePair pair = capture_pair(*thermal, *rgb, o->max_skew, meta.session_id);
      const SavedPair saved = writer.save(pair, meta);
      std::cout << json{{"pair_index", saved.index},
                        {"thermal_path", saved.thermal_path.string()},
                        {"rgb_path", saved.rgb_path.string()},
                        {"skew_ms", pair.skew_ms}}
                       .dump()
                << "\n";
    }
  });
}

void add_calibrate(CLI::App& app) {
  auto* cmd = app.add_subcommand("calibrate", "Estimate the RGB-to-thermal calibration from point pairs");
  struct Opts {
    fs::path pairs, out;
    std::string crop;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--pairs", o->pairs, "CSV: src_x,src_y,dst_x,dst_y per line (RGB -> thermal pixels)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", o->out, "calibration file")->required();
  cmd->add_option("--crop", o->crop, "x,y,w,h crop of the warped RGB frame (default: full frame)");
  cmd->callback([o] {
    const auto pairs = load_point_pairs(o->pairs);
    const Homography h = estimate_perspective(pairs);
    const CropRect crop = o->crop.empty() ? CropRect{0, 0, kRgbRawSize.width, kRgbRawSize.height} : crop_arg(o->crop);
    save_calibration(make_calibration(h, crop), o->out);
    std::cout << json{{"points", pairs.size()},
                      {"mean_reprojection_error_px", mean_reprojection_error(h, pairs)},
                      {"calibration", o->out.string()}}
                     .dump()
              << "\n";
  });
}

void add_fuse(CLI::App& app) {
  auto* cmd = app.add_subcommand("fuse", "Align an RGB frame and fuse it beside its thermal frame (512x192)");
  struct Opts {
    fs::path thermal, rgb, calib, out;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--thermal", o->thermal)->required()->check(CLI::ExistingFile);
  cmd->add_option("--rgb", o->rgb)->required()->check(CLI::ExistingFile);
  cmd->add_option("--calib", o->calib)->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", o->out)->required();
  cmd->callback([o] {
    const Frame thermal = read_png(o->thermal, Modality::thermal);
    const Frame rgb = read_png(o->rgb, Modality::rgb);
    write_png(fuse_side_by_side(thermal, align_rgb(rgb, load_calibration(o->calib))), o->out);
  });
}

void add_split(CLI::App& app) {
  auto* cmd = app.add_subcommand("split", "Build the manifest of a dataset root and assign stratified splits");
  struct Opts {
    fs::path root, out;
    std::uint64_t seed = 0;
    std::string ratios = "0.7,0.2,0.1";
    bool paired = false;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--root", o->root)->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--seed", o->seed)->required();
  cmd->add_option("--ratios", o->ratios, "train,val,test")->capture_default_str();
  cmd->add_flag("--paired-split", o->paired, "keep both modalities of a pair in one split");
  cmd->add_option("--out", o->out, "manifest file (default: <root>/manifest.jsonl)");
  cmd->callback([o] {
    const auto ratios = parse_ratios(o->ratios);
    DatasetManifest m = build_manifest(o->root);
    m = split_manifest(std::move(m), ratios, o->seed, {o->paired});
    const fs::path out = o->out.empty() ? o->root / kManifestFile : o->out;
    save_manifest(m, out);
    for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << json{{"manifest", out.string()},
                      {"train", m.count(Split::train)},
                      {"val", m.count(Split::val)},
                      {"test", m.count(Split::test)},
                      {"ignored", m.ignored.size()},
                      {"hash", manifest_hash(m)}}
                     .dump()
              << "\n";
  });
}

void add_validate(CLI::App& app) {
  auto* cmd = app.add_subcommand("validate", "Report modality and class balance of a manifest");
  auto file = std::make_shared<fs::path>();
  cmd->add_option("--manifest", *file)->required()->check(CLI::ExistingFile);
  cmd->callback([file] {
    const BalanceReport r = validate_dataset(load_manifest(*file));
    json orphans = json::array();
    for (const auto& p : r.orphans) orphans.push_back(p.string());
    std::cout << json{{"thermal", r.thermal},
                      {"rgb", r.rgb},
                      {"combined", r.combined},
                      {"spill", r.spill},
                      {"no_spill", r.no_spill},
                      {"modality_delta", r.modality_delta},
                      {"class_delta", r.class_delta},
                      {"balanced", r.balanced},
                      {"orphans", orphans}}
                     .dump(2)
              << "\n";
  });
}

void add_subset(CLI::App& app) {
  auto* cmd = app.add_subcommand("subset", "Select one modality (and optionally room and liquid) of a manifest");
  struct Opts {
    fs::path manifest, out;
    std::string room, liquid, modality = "thermal";
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--manifest", o->manifest)->required()->check(CLI::ExistingFile);
  cmd->add_option("--room", o->room);
  cmd->add_option("--liquid", o->liquid);
  cmd->add_option("--modality", o->modality)->capture_default_str();
  cmd->add_option("--out", o->out, "subset manifest file")->required();
  cmd->callback([o] {
    SubsetFilter f;
    f.modality = modality_arg(o->modality);
    if (!o->room.empty()) f.room = o->room;
    if (!o->liquid.empty()) f.liquid = o->liquid;
    const auto sub = select_subset(load_manifest(o->manifest), f);
    save_manifest(sub, o->out);
    std::cout << json{{"manifest", o->out.string()}, {"entries", sub.entries.size()}}.dump() << "\n";
  });
}

void add_train(CLI::App& app) {
  auto* cmd = app.add_subcommand("train", "Fine-tune a registry backbone on a manifest subset");
  struct Opts {
    fs::path manifest, out, store = weights_store_dir();
    std::string modality = "thermal", room, liquid, backbone = "VGG19", input;
    TrainConfig cfg;
    bool no_augment = false;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--manifest", o->manifest)->required()->check(CLI::ExistingFile);
  cmd->add_option("--modality", o->modality)->capture_default_str();
  cmd->add_option("--room", o->room);
  cmd->add_option("--liquid", o->liquid);
  cmd->add_option("--backbone", o->backbone)->capture_default_str();
  cmd->add_option("--lr", o->cfg.learning_rate)->capture_default_str();
  cmd->add_option("--patience", o->cfg.patience)->capture_default_str();
  cmd->add_option("--max-epochs", o->cfg.max_epochs)->capture_default_str();
  cmd->add_option("--batch-train", o->cfg.batch_train)->capture_default_str();
  cmd->add_option("--batch-val", o->cfg.batch_val)->capture_default_str();
  cmd->add_option("--seed", o->cfg.seed)->capture_default_str();
  cmd->add_option("--input", o->input, "model input WxH (default: the backbone's native input)");
  cmd->add_flag("--no-augment", o->no_augment, "disable flip/rotation/contrast augmentation");
  cmd->add_option("--weights-store", o->store, "pretrained weights directory")->capture_default_str();
  cmd->add_option("--out", o->out)->required();
  cmd->callback([o] {
    TrainConfig cfg = o->cfg;
    cfg.backbone = o->backbone;
    cfg.subset.modality = modality_arg(o->modality);
    if (!o->room.empty()) cfg.subset.room = o->room;
    if (!o->liquid.empty()) cfg.subset.liquid = o->liquid;
    if (!o->input.empty()) cfg.input = size_arg(o->input);
    if (o->no_augment) cfg.aug = AugmentConfig::none();
    cfg.weights_store = o->store;
    TrainHooks hooks;
    hooks.on_epoch = [](const EpochRecord& r) {
      std::cerr << "epoch " << r.epoch << "  train_loss " << r.train_loss << "  train_acc " << r.train_acc
                << "  val_loss " << r.val_loss << "  val_acc " << r.val_acc << std::endl;
    };
    const auto r = train(cfg, load_manifest(o->manifest), o->out, hooks);
    std::cout << json{{"model", r.model.weights_path.string()},
                      {"stopped_epoch", r.history.stopped_epoch},
                      {"restored_epoch", r.history.restored_epoch},
                      {"early_stopped", r.history.early_stopped},
                      {"val_acc", r.final_val_acc},
                      {"size_bytes", r.model.size_bytes},
                      {"freeze", freeze_report_json(r.freeze)}}
                     .dump(2)
              << "\n";
  });
}

void add_eval(CLI::App& app) {
  auto* cmd = app.add_subcommand("eval", "Test-split accuracy and confusion matrix of a trained model");
  struct Opts {
    fs::path model, manifest, out;
    std::string split = "test";
    std::size_t batch = 2;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--model", o->model, "training output directory or model.weights")->required();
  cmd->add_option("--manifest", o->manifest)->required()->check(CLI::ExistingFile);
  cmd->add_option("--split", o->split)->capture_default_str();
  cmd->add_option("--batch", o->batch)->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--out", o->out, "eval.json path (default: next to the model)");
  cmd->callback([o] {
    auto clf = load_classifier(model_file(o->model));
    const auto split = parse_split(o->split);
    if (!split || *split == Split::unassigned) throw Error(Errc::invalid_argument, "bad split '" + o->split + "'");
    SubsetFilter f;
    f.modality = clf->modality();
    const auto rep = evaluate_accuracy(*clf, select_subset(load_manifest(o->manifest), f), {o->batch, *split});
    const std::string text = eval_report_json(rep);
    write_text(o->out.empty() ? default_out_dir(o->model) / "eval.json" : o->out, text + "\n");
    std::cout << text << "\n";
  });
}

void add_bench(CLI::App& app) {
  auto* cmd = app.add_subcommand("bench", "Single-image inference latency of a trained model");
  struct Opts {
    fs::path model, frames, out;
    LatencyOptions lat;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--model", o->model, "training output directory or model.weights")->required();
  cmd->add_option("--frames", o->frames, "directory of sample PNG frames")->required();
  cmd->add_option("--warmup", o->lat.warmup)->capture_default_str();
  cmd->add_option("--iters", o->lat.iterations)->capture_default_str();
  cmd->add_option("--hardware-label", o->lat.hardware_label);
  cmd->add_option("--out", o->out, "output directory for latency.csv (default: next to the model)");
  cmd->callback([o] {
    auto clf = load_classifier(model_file(o->model));
    std::vector<Frame> frames;
    for (const auto& p : png_files(o->frames)) {
      Frame f = read_png(p, clf->modality());
      if (f.size() == canonical_size(clf->modality())) frames.push_back(std::move(f));
    }
    if (frames.empty()) {
      throw Error(Errc::missing_file, "no " + std::string(to_string(clf->modality())) + " frames under " +
                                          o->frames.string());
    }
    const auto stats = measure_latency(*clf, frames, o->lat);
    const fs::path out = o->out.empty() ? default_out_dir(o->model) : o->out;
    fs::create_directories(out);
    write_latency_csv(stats, out / "latency.csv");
    std::cout << latency_stats_json(stats) << "\n";
  });
}

void add_report(CLI::App& app) {
  auto* cmd = app.add_subcommand("report", "Render benchmark rows as a results table");
  struct Opts {
    fs::path rows, out;
    std::string format = "markdown", label = "Label";
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--rows", o->rows, "CSV with a header line")->required()->check(CLI::ExistingFile);
  cmd->add_option("--format", o->format, "text | csv | markdown")->capture_default_str();
  cmd->add_option("--label-header", o->label)->capture_default_str();
  cmd->add_option("--out", o->out, "write the table here as well (e.g. report.md)");
  cmd->callback([o] {
    const auto fmt = parse_report_format(o->format);
    if (!fmt) throw Error(Errc::invalid_argument, "unknown report format '" + o->format + "'");
    const auto rows = load_rows_csv(o->rows);
    const std::string table = render_report(rows, *fmt, o->label);
    if (!o->out.empty()) write_text(o->out, table);
    std::cout << table;
  });
}

volatile std::sig_atomic_t g_stop = 0;

void add_serve(CLI::App& app) {
  auto* cmd = app.add_subcommand("serve", "Serve live capture and classification over HTTP");
  struct Opts {
    fs::path model, session_root, calib;
    std::string modality = "thermal", listen = "127.0.0.1:8750", thermal = "sim:1", rgb = "sim:1";
    std::size_t queue_depth = 4;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--model", o->model, "training output directory or model.weights")->required();
  cmd->add_option("--modality", o->modality)->capture_default_str();
  cmd->add_option("--listen", o->listen)->capture_default_str();
  cmd->add_option("--session-root", o->session_root)->required();
  cmd->add_option("--calib", o->calib, "calibration file (needed by combined models)");
  cmd->add_option("--thermal-source", o->thermal)->capture_default_str();
  cmd->add_option("--rgb-source", o->rgb)->capture_default_str();
  cmd->add_option("--queue-depth", o->queue_depth)->capture_default_str();
  cmd->callback([o] {
    auto clf = load_classifier(model_file(o->model));
    const Modality want = modality_arg(o->modality);
    if (clf->modality() != want) {
      throw Error(Errc::modality_mismatch, "model was trained on " + std::string(to_string(clf->modality())) +
                                               " frames, not " + o->modality);
    }
    ServiceOptions opts;
    opts.session_root = o->session_root;
    if (!o->calib.empty()) opts.calibration = load_calibration(o->calib);
    opts.thermal_source = parse_source_descriptor(o->thermal, Modality::thermal);
    opts.rgb_source = parse_source_descriptor(o->rgb, Modality::rgb);
    opts.queue_depth = o->queue_depth;
    InferenceService service(opts);
    service.set_model(std::move(clf));
    HttpFrontend http(service);
    const auto [host, port] = parse_listen_address(o->listen);
    const int bound = http.start(host, port);
    std::cerr << "listening on " << host << ":" << bound << std::endl;
    std::signal(SIGINT, [](int) { g_stop = 1; });
    std::signal(SIGTERM, [](int) { g_stop = 1; });
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
    http.stop();
  });
}

void add_synth(CLI::App& app) {
  auto* cmd = app.add_subcommand("synth", "Generate a synthetic thermal/RGB dataset with ground truth");
  struct Opts {
    std::string profile = "separable";
    std::size_t n = 100;
    fs::path out;
    std::uint64_t seed = 0;
    bool combined = false;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--profile", o->profile, "separable | hard")->capture_default_str();
  cmd->add_option("--n", o->n, "pairs per class")->capture_default_str();
  cmd->add_option("--out", o->out)->required();
  cmd->add_option("--seed", o->seed)->capture_default_str();
  cmd->add_flag("--combined", o->combined, "also write fused 512x192 frames");
  cmd->callback([o] {
    SynthSpec spec;
    if (o->profile == "separable") {
      spec = SynthSpec::separable(o->seed);
    } else if (o->profile == "hard") {
      spec = SynthSpec::hard(o->seed);
    } else {
      throw Error(Errc::invalid_argument, "unknown profile '" + o->profile + "'");
    }
    SynthDatasetOptions opts;
    opts.with_combined = o->combined;
    const auto m = gen_dataset(spec, o->n, o->out, opts);
    std::cout << json{{"root", o->out.string()}, {"entries", m.entries.size()}, {"seed", o->seed}}.dump() << "\n";
  });
}

void add_weights(CLI::App& app) {
  auto* cmd = app.add_subcommand("weights", "Manage the pretrained backbone weights store");
  cmd->require_subcommand(1);
  auto store = std::make_shared<fs::path>(weights_store_dir());
  cmd->add_option("--store", *store, "weights directory")->capture_default_str();

  auto* init = cmd->add_subcommand("init", "Write seeded surrogate weights for backbones without published ones");
  struct InitOpts {
    std::string backbone = "all";
    SurrogateOptions so;
    bool force = false;
  };
  auto io = std::make_shared<InitOpts>();
  init->add_option("--backbone", io->backbone, "registry name or 'all'")->capture_default_str();
  init->add_option("--seed", io->so.seed)->capture_default_str();
  init->add_option("--calibration-images", io->so.calibration_images)->capture_default_str();
  init->add_flag("--force", io->force, "overwrite weights already in the store");
  init->callback([store, io] {
    std::vector<BackboneSpec> specs;
    if (io->backbone == "all") {
      specs = list_backbones();
    } else {
      specs.push_back(find_backbone(io->backbone));
    }
    for (const auto& spec : specs) {
      const fs::path have = pretrained_weights_path(spec, *store);
      if (fs::exists(have) && !io->force) {
        std::cerr << spec.name << ": kept existing " << have.string() << "\n";
        continue;
      }
      std::cout << write_surrogate_weights(spec, io->so, *store).string() << "\n";
    }
  });

  auto* install = cmd->add_subcommand("install", "Install converted weights for a backbone");
  struct InstallOpts {
    std::string backbone, source = "imported";
    fs::path file;
  };
  auto ins = std::make_shared<InstallOpts>();
  install->add_option("--backbone", ins->backbone)->required();
  install->add_option("--file", ins->file, "weights file in this project's layout")->required()->check(CLI::ExistingFile);
  install->add_option("--source", ins->source, "provenance note")->capture_default_str();
  install->callback([store, ins] {
    std::cout << install_weights(find_backbone(ins->backbone), ins->file, ins->source, *store).string() << "\n";
  });

  auto* list = cmd->add_subcommand("list", "Show the registry and which backbones have weights");
  list->callback([store] {
    for (const auto& spec : list_backbones()) {
      const bool have = fs::exists(pretrained_weights_path(spec, *store));
      const auto prov = stored_weights_provenance(spec, *store);
      std::cout << spec.name << "\t" << spec.native_input.width << "x" << spec.native_input.height << "\t"
                << spec.preprocess_id << "\t" << (have ? prov.value("source", std::string("unknown")) : "-") << "\n";
    }
  });
}

}  // namespace
}  // namespace spill

int main(int argc, char** argv) {
  using namespace spill;
  CLI::App app{"Spill detection toolkit: capture, align, curate, train, evaluate and serve"};
  app.require_subcommand(1);
  add_capture(app);
  add_calibrate(app);
  add_fuse(app);
  add_split(app);
  add_validate(app);
  add_subset(app);
  add_train(app);
  add_eval(app);
  add_bench(app);
  add_report(app);
  add_serve(app);
  add_synth(app);
  add_weights(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
