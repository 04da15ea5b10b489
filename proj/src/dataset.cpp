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

#include "spill/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "spill/errors.hpp"
#include "spill/frame_sources.hpp"
#include "spill/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace spill {

std::string_view to_string(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view text) noexcept {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  if (text == "unassigned") return Split::unassigned;
  return std::nullopt;
}

std::size_t DatasetManifest::count(Split s) const noexcept {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [s](const ManifestEntry& e) { return e.split == s; }));
}

void check_ratios(const SplitRatios& r) {
  for (double v : {r.train, r.val, r.test}) {
    if (!(v > 0.0 && v < 1.0)) throw Error(Errc::invalid_argument, "split ratios must each lie in (0,1)");
  }
  if (std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
    throw Error(Errc::invalid_argument, "split ratios must sum to 1");
  }
}

SplitRatios parse_ratios(std::string_view text) {
  std::vector<double> v;
  std::stringstream ss{std::string(text)};
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw Error(Errc::invalid_argument, "bad ratio '" + tok + "'");
    }
  }
  if (v.size() != 3) throw Error(Errc::invalid_argument, "expected three ratios train,val,test");
  SplitRatios r{v[0], v[1], v[2]};
  check_ratios(r);
  return r;
}

namespace {

struct SidecarInfo {
  std::string room;
  std::string liquid;
};

std::unordered_map<std::uint64_t, SidecarInfo> read_sidecar(const fs::path& file, std::vector<std::string>& warnings) {
  std::unordered_map<std::uint64_t, SidecarInfo> out;
  std::ifstream in(file);
  if (!in) return out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      out[j.at("index").get<std::uint64_t>()] = {j.value("room", std::string(kUnknown)),
                                                 j.value("liquid", std::string(kUnknown))};
    } catch (const json::exception& e) {
      warnings.push_back(file.filename().string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

bool is_metadata_file(const fs::path& rel) {
  if (rel.has_parent_path()) return false;
  const std::string name = rel.filename().string();
  return name == kPairsSidecar || name == kManifestFile;
}

}  // namespace

DatasetManifest build_manifest(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw Error(Errc::unreadable_root, "dataset root not readable: " + root.string());

  DatasetManifest m;
  m.root = root;
  const auto sidecar = read_sidecar(root / std::string(kPairsSidecar), m.warnings);
  static const std::regex kName(R"(pair_(\d{6,})_([a-z]+)\.png)");

  fs::recursive_directory_iterator it(root, ec);
  if (ec) throw Error(Errc::unreadable_root, "cannot list " + root.string() + ": " + ec.message());
  for (fs::recursive_directory_iterator end; it != end; it.increment(ec)) {
    if (ec) throw Error(Errc::unreadable_root, "cannot list " + root.string() + ": " + ec.message());
    if (!it->is_regular_file()) continue;
    const fs::path rel = it->path().lexically_relative(root);
    if (is_metadata_file(rel)) continue;

    std::vector<std::string> parts;
    for (const auto& p : rel) parts.push_back(p.string());
    std::smatch match;
    const auto mod = parts.size() == 3 ? parse_modality(parts[0]) : std::nullopt;
    const auto cls = parts.size() == 3 ? parse_class_label(parts[1]) : std::nullopt;
    const bool ok = mod && cls && parts[1] == to_string(*cls) && std::regex_match(parts[2], match, kName) &&
                    match[2].str() == parts[0];
    if (!ok) {
      m.ignored.push_back(rel);
      continue;
    }
    ManifestEntry e;
    e.path = rel;
    e.modality = *mod;
    e.class_label = *cls;
    e.pair_index = std::stoull(match[1].str());
    if (auto s = sidecar.find(e.pair_index); s != sidecar.end()) {
      e.room = s->second.room;
      e.liquid = s->second.liquid;
    }
    m.entries.push_back(std::move(e));
  }
  std::sort(m.entries.begin(), m.entries.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path.generic_string() < b.path.generic_string(); });
  std::sort(m.ignored.begin(), m.ignored.end());
  if (m.entries.empty()) m.warnings.push_back("no images found under " + root.string());
  for (const auto& p : m.ignored) m.warnings.push_back("ignored file outside layout: " + p.generic_string());
  return m;
}

std::array<std::size_t, 3> apportion(std::size_t n, const SplitRatios& ratios) {
  const double r[3] = {ratios.train, ratios.val, ratios.test};
  std::array<std::size_t, 3> out{};
  double rem[3];
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double q = static_cast<double>(n) * r[i];
    if (std::abs(q - std::round(q)) < 1e-9) q = std::round(q);
    out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(std::floor(q));
    rem[i] = q - std::floor(q);
    assigned += out[static_cast<std::size_t>(i)];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++out[static_cast<std::size_t>(order[k % 3])];
  return out;
}

namespace {

Split split_for_rank(std::size_t rank, const std::array<std::size_t, 3>& counts) {
  if (rank < counts[0]) return Split::train;
  if (rank < counts[0] + counts[1]) return Split::val;
  return Split::test;
}

std::string cell_key(const ManifestEntry& e, bool with_modality) {
  std::string key = e.room + "|" + e.liquid + "|";
  if (with_modality) key += std::string(to_string(e.modality)) + "|";
  return key + std::string(to_string(e.class_label));
}

constexpr double kRemainderEps = 1e-9;

struct CellPlan {
  std::string key;
  std::vector<const std::vector<std::size_t>*> units;
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t need = 0;
  std::uint64_t tiebreak = 0;
  std::array<bool, 3> extra{};
};

// Kuhn-style augmenting path: give cell c one more extra unit, possibly
// moving another cell's extra to a different split.
bool augment(std::vector<CellPlan>& cells, std::array<std::size_t, 3>& open, std::size_t c,
             std::vector<bool>& visited) {
  if (visited[c]) return false;
  visited[c] = true;
  for (std::size_t k = 0; k < 3; ++k) {
    if (cells[c].extra[k] || cells[c].rem[k] <= kRemainderEps) continue;
    if (open[k] > 0) {
      --open[k];
      cells[c].extra[k] = true;
      --cells[c].need;
      return true;
    }
  }
  for (std::size_t k = 0; k < 3; ++k) {
    if (cells[c].extra[k] || cells[c].rem[k] <= kRemainderEps) continue;
    for (std::size_t other = 0; other < cells.size(); ++other) {
      if (other == c || !cells[other].extra[k]) continue;
      // other gives up k if it can take some other split instead
      cells[other].extra[k] = false;
      ++cells[other].need;
      if (augment(cells, open, other, visited)) {
        cells[c].extra[k] = true;
        --cells[c].need;
        return true;
      }
      --cells[other].need;
      cells[other].extra[k] = true;
    }
  }
  return false;
}

}  // namespace

DatasetManifest split_manifest(DatasetManifest m, const SplitRatios& ratios, std::uint64_t seed,
                               const SplitOptions& options) {
  check_ratios(ratios);
  for (const auto& e : m.entries) {
    if (e.split != Split::unassigned) {
      throw Error(Errc::invalid_argument, "entry already assigned to a split: " + e.path.generic_string());
    }
  }
  m.seed = seed;

  // Each cell is a list of units; a unit is one entry, or with paired splits
  // every entry sharing a pair index.
  std::map<std::string, std::map<std::string, std::vector<std::size_t>>> grouped;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    std::string unit;
    if (options.paired) {
      char buf[24];
      std::snprintf(buf, sizeof buf, "%020llu", static_cast<unsigned long long>(e.pair_index));
      unit = buf;
    } else {
      unit = e.path.generic_string();
    }
    grouped[cell_key(e, !options.paired)][unit].push_back(i);
  }

  const double r[3] = {ratios.train, ratios.val, ratios.test};
  std::vector<CellPlan> cells;
  std::size_t total = 0;
  std::array<std::size_t, 3> floor_sum{};
  for (auto& [key, units] : grouped) {
    CellPlan plan;
    plan.key = key;
    for (const auto& [name, members] : units) plan.units.push_back(&members);  // sorted by unit name
    if (plan.units.size() < 3) {
      m.warnings.push_back("cell '" + key + "' has " + std::to_string(plan.units.size()) +
                           " entries; all assigned to train");
      for (const auto* members : plan.units) {
        for (std::size_t i : *members) m.entries[i].split = Split::train;
      }
      continue;
    }
    Rng rng(seed, fnv1a(key));
    rng.shuffle(plan.units.begin(), plan.units.end());
    const std::size_t n = plan.units.size();
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      double q = static_cast<double>(n) * r[k];
      if (std::abs(q - std::round(q)) < kRemainderEps) q = std::round(q);
      plan.counts[k] = static_cast<std::size_t>(std::floor(q));
      plan.rem[k] = q - std::floor(q);
      assigned += plan.counts[k];
      floor_sum[k] += plan.counts[k];
    }
    plan.need = n - assigned;
    plan.tiebreak = derive_seed(seed, fnv1a(key));
    total += n;
    cells.push_back(std::move(plan));
  }

  // Leftover units: each cell takes at most one per split, only where its
  // quota has a fractional part, and the split totals must match the global
  // apportionment. Greedy by remainder first, then augmenting-path repair.
  const auto target = apportion(total, ratios);
  std::array<std::size_t, 3> open{};
  for (std::size_t k = 0; k < 3; ++k) open[k] = target[k] - floor_sum[k];
  struct Candidate {
    double rem;
    std::size_t split;
    std::uint64_t tiebreak;
    std::size_t cell;
  };
  std::vector<Candidate> cand;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t k = 0; k < 3; ++k) {
      if (cells[c].rem[k] > kRemainderEps) cand.push_back({cells[c].rem[k], k, cells[c].tiebreak, c});
    }
  }
  std::sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
    if (std::abs(a.rem - b.rem) > kRemainderEps) return a.rem > b.rem;
    if (a.split != b.split) return a.split < b.split;
    if (a.tiebreak != b.tiebreak) return a.tiebreak < b.tiebreak;
    return a.cell < b.cell;
  });
  for (const auto& cd : cand) {
    auto& cell = cells[cd.cell];
    if (cell.need > 0 && open[cd.split] > 0) {
      cell.extra[cd.split] = true;
      --cell.need;
      --open[cd.split];
    }
  }
  bool balanced_totals = true;
  for (std::size_t c = 0; c < cells.size() && balanced_totals; ++c) {
    while (cells[c].need > 0) {
      std::vector<bool> visited(cells.size(), false);
      if (!augment(cells, open, c, visited)) {
        balanced_totals = false;
        break;
      }
    }
  }
  if (!balanced_totals) {
    // Cannot happen for consistent inputs; fall back to per-cell rounding.
    m.warnings.push_back("split totals could not be matched to the global apportionment; using per-cell rounding");
    for (auto& cell : cells) {
      cell.extra = {};
      const auto counts = apportion(cell.units.size(), ratios);
      for (std::size_t k = 0; k < 3; ++k) cell.counts[k] = counts[k];
    }
  }

  for (const auto& cell : cells) {
    std::array<std::size_t, 3> counts = cell.counts;
    for (std::size_t k = 0; k < 3; ++k) counts[k] += cell.extra[k] ? 1 : 0;
    for (std::size_t rank = 0; rank < cell.units.size(); ++rank) {
      for (std::size_t i : *cell.units[rank]) m.entries[i].split = split_for_rank(rank, counts);
    }
  }
  return m;
}

BalanceReport validate_dataset(const DatasetManifest& m) {
  BalanceReport r;
  std::set<std::uint64_t> thermal_idx;
  std::set<std::uint64_t> rgb_idx;
  for (const auto& e : m.entries) {
    switch (e.modality) {
      case Modality::thermal: ++r.thermal; thermal_idx.insert(e.pair_index); break;
      case Modality::rgb: ++r.rgb; rgb_idx.insert(e.pair_index); break;
      case Modality::combined: ++r.combined; break;
    }
    (e.class_label == ClassLabel::spill ? r.spill : r.no_spill) += 1;
  }
  r.modality_delta = r.thermal > r.rgb ? r.thermal - r.rgb : r.rgb - r.thermal;
  r.class_delta = r.spill > r.no_spill ? r.spill - r.no_spill : r.no_spill - r.spill;
  r.balanced = r.modality_delta == 0 && r.class_delta == 0;
  for (const auto& e : m.entries) {
    if (e.modality == Modality::rgb && !thermal_idx.count(e.pair_index)) r.orphans.push_back(e.path);
    if (e.modality == Modality::thermal && !rgb_idx.count(e.pair_index)) r.orphans.push_back(e.path);
  }
  return r;
}

DatasetManifest select_subset(const DatasetManifest& m, const SubsetFilter& filter) {
  DatasetManifest out;
  out.root = m.root;
  out.seed = m.seed;
  for (const auto& e : m.entries) {
    if (e.modality != filter.modality) continue;
    if (filter.room && e.room != *filter.room) continue;
    if (filter.liquid && e.liquid != *filter.liquid) continue;
    out.entries.push_back(e);
  }
  if (out.entries.empty()) {
    throw Error(Errc::empty_subset, "no entries match room=" + filter.room.value_or("*") +
                                        " liquid=" + filter.liquid.value_or("*") +
                                        " modality=" + std::string(to_string(filter.modality)));
  }
  return out;
}

std::vector<ManifestEntry> entries_in(const DatasetManifest& m, Split s) {
  std::vector<ManifestEntry> out;
  std::copy_if(m.entries.begin(), m.entries.end(), std::back_inserter(out),
               [s](const ManifestEntry& e) { return e.split == s; });
  return out;
}

void save_manifest(const DatasetManifest& m, const fs::path& file) {
  const fs::path dir = file.has_parent_path() ? file.parent_path() : fs::path(".");
  std::error_code ec;
  if (file.has_parent_path()) fs::create_directories(dir, ec);
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(Errc::write_failure, "cannot write " + file.string());
    const fs::path base = fs::weakly_canonical(dir);
    for (const auto& e : m.entries) {
      const fs::path full = fs::weakly_canonical(m.root / e.path);
      fs::path rel = full.lexically_relative(base);
      if (rel.empty() || *rel.begin() == "..") rel = full;
      json j{{"path", rel.generic_string()},
             {"modality", to_string(e.modality)},
             {"class_label", to_string(e.class_label)},
             {"room", e.room},
             {"liquid", e.liquid},
             {"split", to_string(e.split)},
             {"pair_index", e.pair_index},
             {"seed", m.seed}};
      out << j.dump() << '\n';
    }
    if (!out) throw Error(Errc::write_failure, "short write to " + file.string());
  }
  fs::rename(tmp, file, ec);
  if (ec) throw Error(Errc::write_failure, "cannot replace " + file.string() + ": " + ec.message());
}

DatasetManifest load_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(Errc::missing_file, "cannot open manifest " + file.string());
  DatasetManifest m;
  m.root = file.has_parent_path() ? file.parent_path() : fs::path(".");
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ManifestEntry e;
      e.path = j.at("path").get<std::string>();
      auto mod = parse_modality(j.at("modality").get<std::string>());
      auto cls = parse_class_label(j.at("class_label").get<std::string>());
      auto split = parse_split(j.value("split", std::string("unassigned")));
      if (!mod || !cls || !split) throw Error(Errc::invalid_argument, "bad enum value");
      e.modality = *mod;
      e.class_label = *cls;
      e.split = *split;
      e.room = j.value("room", std::string(kUnknown));
      e.liquid = j.value("liquid", std::string(kUnknown));
      e.pair_index = j.value("pair_index", std::uint64_t{0});
      m.seed = j.value("seed", m.seed);
      if (!seen.insert(e.path.generic_string()).second) {
        throw Error(Errc::invalid_argument, "duplicate path " + e.path.generic_string());
      }
      m.entries.push_back(std::move(e));
    } catch (const json::exception& e) {
      throw Error(Errc::invalid_argument, file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.code(), file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

std::string manifest_hash(const DatasetManifest& m) {
  std::uint64_t h = fnv1a("");
  for (const auto& e : m.entries) {
    h = fnv1a(e.path.generic_string(), h);
    for (std::string_view f : {to_string(e.modality), to_string(e.class_label), std::string_view(e.room),
                               std::string_view(e.liquid), to_string(e.split)}) {
      h = fnv1a("|", h);
      h = fnv1a(f, h);
    }
    h = fnv1a("\n", h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace spill
