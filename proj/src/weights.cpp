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

#include "spill/weights.hpp"

#include <array>
#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "spill/errors.hpp"
#include "spill/geometry.hpp"
#include "spill/preprocess.hpp"
#include "spill/rng.hpp"
#include "spill/timefmt.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace spill {

static_assert(std::endian::native == std::endian::little, "weights files are little-endian");

namespace {

constexpr std::array<char, 8> kMagic = {'S', 'P', 'L', 'W', '0', '0', '0', '1'};

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

std::map<std::string, torch::Tensor> WeightsFile::by_name() const {
  std::map<std::string, torch::Tensor> out;
  for (const auto& [name, t] : tensors) out.emplace(name, t);
  return out;
}

void save_weights(const fs::path& path, const NamedTensors& tensors, const json& meta) {
  json header{{"tensors", json::array()}, {"meta", meta}};
  std::uint64_t offset = 0;
  std::vector<torch::Tensor> data;
  for (const auto& [name, t] : tensors) {
    auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    header["tensors"].push_back({{"name", name}, {"shape", c.sizes().vec()}, {"dtype", "f32"}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(c.numel()) * sizeof(float);
    data.push_back(std::move(c));
  }
  const std::string text = header.dump();
  if (!path.parent_path().empty()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  const fs::path tmp = path.parent_path() / ("." + path.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::write_failure, "cannot write " + path.string());
    const std::uint64_t len = text.size();
    out.write(kMagic.data(), kMagic.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& c : data) {
      out.write(reinterpret_cast<const char*>(c.data_ptr<float>()),
                static_cast<std::streamsize>(static_cast<std::size_t>(c.numel()) * sizeof(float)));
    }
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Error(Errc::write_failure, "short write to " + path.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(Errc::write_failure, "cannot replace " + path.string() + ": " + ec.message());
}

WeightsFile load_weights(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::missing_file, "no weights file at " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw Error(Errc::model_load_failure, path.string() + " is not a weights file");
  const std::uint64_t len = read_u64(in);
  const auto file_size = fs::file_size(path);
  if (!in || len > file_size) throw Error(Errc::model_load_failure, path.string() + ": bad header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const std::uint64_t data_start = kMagic.size() + sizeof(std::uint64_t) + len;
  WeightsFile wf;
  try {
    const json header = json::parse(text);
    wf.meta = header.value("meta", json::object());
    for (const auto& e : header.at("tensors")) {
      if (e.at("dtype").get<std::string>() != "f32") throw Error(Errc::model_load_failure, "unsupported dtype");
      const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      auto t = torch::empty(shape, torch::kFloat32);
      const auto bytes = static_cast<std::uint64_t>(t.numel()) * sizeof(float);
      if (data_start + offset + bytes > file_size) throw Error(Errc::model_load_failure, "truncated tensor data");
      in.seekg(static_cast<std::streamoff>(data_start + offset));
      in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(bytes));
      if (!in) throw Error(Errc::model_load_failure, "cannot read tensor data");
      wf.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::model_load_failure, path.string() + ": bad header: " + e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::model_load_failure) throw Error(Errc::model_load_failure, path.string() + ": " + e.what());
    throw;
  }
  return wf;
}

fs::path weights_store_dir() {
  if (const char* env = std::getenv("SPILL_WEIGHTS_DIR"); env && *env) return env;
  const char* home = std::getenv("HOME");
  return fs::path(home && *home ? home : ".") / ".cache" / "spill" / "weights";
}

fs::path pretrained_weights_path(const BackboneSpec& spec, const fs::path& store) {
  return store / (spec.name + ".weights");
}

json stored_weights_provenance(const BackboneSpec& spec, const fs::path& store) {
  std::ifstream in(store / (spec.name + ".json"));
  if (!in) return json::object();
  try {
    return json::parse(in);
  } catch (const json::exception&) {
    return json::object();
  }
}

BackboneGraph load_pretrained_backbone(const BackboneSpec& spec, const fs::path& store) {
  const fs::path file = pretrained_weights_path(spec, store);
  std::error_code ec;
  if (!fs::is_regular_file(file, ec)) {
    throw Error(Errc::weights_unavailable, "no pretrained weights for " + spec.name + " at " + file.string() +
                                               " (run `spill weights init --backbone " + spec.name +
                                               "` or install them)");
  }
  BackboneGraph net(load_backbone_graph(spec.name));
  try {
    net->load_tensors(load_weights(file).by_name());
  } catch (const Error& e) {
    throw Error(Errc::model_load_failure, "weights for " + spec.name + " do not fit the graph: " + e.what());
  }
  return net;
}

std::vector<Frame> smooth_noise_frames(std::size_t n, Size size, std::uint64_t seed) {
  static constexpr std::array<int, 4> kGrids = {2, 4, 8, 16};
  std::vector<Frame> out;
  Rng rng(seed, 0x5eed);
  for (std::size_t i = 0; i < n; ++i) {
    const int g = kGrids[i % kGrids.size()];
    Frame coarse = Frame::blank(g, g, Modality::rgb);
    for (auto& p : coarse.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    out.push_back(resize_frame(coarse, size.width, size.height));
  }
  return out;
}

BackboneGraph make_surrogate_backbone(const BackboneSpec& spec, const SurrogateOptions& options) {
  if (options.calibration_images < 2) throw Error(Errc::invalid_argument, "calibration needs at least 2 images");
  BackboneGraph net(load_backbone_graph(spec.name));
  net->reset_parameters(options.seed);
  const Size size = options.input.value_or(spec.native_input);
  const auto frames = smooth_noise_frames(options.calibration_images, size, options.seed);
  net->calibrate(preprocess(frames, spec, size));
  return net;
}

namespace {

void write_provenance(const fs::path& file, const json& j) {
  const fs::path tmp = file.parent_path() / ("." + file.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump(2) << "\n";
    if (!out) throw Error(Errc::write_failure, "cannot write " + file.string());
  }
  std::error_code ec;
  fs::rename(tmp, file, ec);
  if (ec) throw Error(Errc::write_failure, "cannot replace " + file.string());
}

}  // namespace

fs::path write_surrogate_weights(const BackboneSpec& spec, const SurrogateOptions& options, const fs::path& store) {
  auto net = make_surrogate_backbone(spec, options);
  const json prov{{"backbone", spec.name},
                  {"source", "seeded-init"},
                  {"seed", options.seed},
                  {"calibration_images", options.calibration_images},
                  {"created_at", iso8601_utc()}};
  const fs::path file = pretrained_weights_path(spec, store);
  save_weights(file, net->named_tensors(), prov);
  write_provenance(store / (spec.name + ".json"), prov);
  return file;
}

fs::path install_weights(const BackboneSpec& spec, const fs::path& file, const std::string& source,
                         const fs::path& store) {
  auto wf = load_weights(file);
  BackboneGraph net(load_backbone_graph(spec.name));
  net->load_tensors(wf.by_name());  // validates names and shapes
  json prov{{"backbone", spec.name}, {"source", source}, {"imported_from", fs::absolute(file).string()},
            {"created_at", iso8601_utc()}};
  if (wf.meta.is_object()) prov["original_meta"] = wf.meta;
  const fs::path dest = pretrained_weights_path(spec, store);
  save_weights(dest, net->named_tensors(), prov);
  write_provenance(store / (spec.name + ".json"), prov);
  return dest;
}

}  // namespace spill
