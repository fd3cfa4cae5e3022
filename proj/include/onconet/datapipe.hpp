#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "onconet/image.hpp"
#include "onconet/tensor.hpp"
#include "onconet/tensor_io.hpp"

namespace onconet {

enum class Modality { Pet, Ct, MaskedCt, PetCt };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::Pet: return "PET";
    case Modality::Ct: return "CT";
    case Modality::MaskedCt: return "MASKED_CT";
    case Modality::PetCt: return "PET_CT";
  }
  return "?";
}

inline Modality parse_modality(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (s == "PET") return Modality::Pet;
  if (s == "CT") return Modality::Ct;
  if (s == "MASKED_CT") return Modality::MaskedCt;
  if (s == "PET_CT") return Modality::PetCt;
  throw std::invalid_argument("unknown modality: " + s);
}

inline std::size_t modality_channels(Modality m) { return m == Modality::PetCt ? 2 : 1; }

enum class Split { Train, Eval };

inline std::string to_string(Split s) { return s == Split::Train ? "train" : "eval"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "eval") return Split::Eval;
  throw std::invalid_argument("unknown split: " + s);
}

/// One patient's 2-d slice set.
struct Sample {
  std::string patient_id;
  std::string institution;
  Tensor<float> ct;    // [1, H, W]
  Tensor<float> pet;   // [1, h, w], h <= H
  Tensor<float> mask;  // [1, H, W], values in {0, 1}
  int label = 0;       // 0 survival, 1 death
  Split split = Split::Train;
};

struct ManifestRow {
  std::string patient_id;
  std::string institution;
  std::string ct_path;
  std::string pet_path;
  std::string mask_path;
  int label = 0;
  Split split = Split::Train;
};

inline constexpr const char* kManifestHeader = "patient_id,institution,ct_path,pet_path,mask_path,label,split";

/// Manifest CSV. Relative paths resolve against `base_dir`.
struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRow> rows;

  std::filesystem::path resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].split == s) out.push_back(i);
    return out;
  }

  void validate(bool check_paths = true) const {
    std::set<std::string> ids;
    for (const auto& r : rows) {
      if (!ids.insert(r.patient_id).second) throw std::invalid_argument("manifest: duplicate patient_id " + r.patient_id);
      if (r.label != 0 && r.label != 1)
        throw std::invalid_argument("manifest: label must be 0 or 1 for " + r.patient_id);
      if (check_paths)
        for (const auto* p : {&r.ct_path, &r.pet_path, &r.mask_path})
          if (!std::filesystem::exists(resolve(*p)))
            throw std::invalid_argument("manifest: missing file " + resolve(*p).string());
    }
  }
};

inline Manifest read_manifest(const std::filesystem::path& csv) {
  std::ifstream is(csv);
  if (!is) throw std::invalid_argument("cannot open manifest " + csv.string());
  Manifest m;
  m.base_dir = csv.parent_path();
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("manifest: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) throw std::invalid_argument("manifest: unexpected header: " + line);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw std::invalid_argument("manifest line " + std::to_string(lineno) + ": expected 7 fields");
    ManifestRow r{f[0], f[1], f[2], f[3], f[4], 0, Split::Train};
    if (f[5] != "0" && f[5] != "1")
      throw std::invalid_argument("manifest line " + std::to_string(lineno) + ": label must be 0 or 1");
    r.label = f[5] == "1";
    r.split = parse_split(f[6]);
    m.rows.push_back(std::move(r));
  }
  m.validate(false);
  return m;
}

inline void write_manifest(const std::filesystem::path& csv, const Manifest& m) {
  std::ofstream os(csv);
  if (!os) throw std::invalid_argument("cannot write manifest " + csv.string());
  os << kManifestHeader << '\n';
  for (const auto& r : m.rows)
    os << r.patient_id << ',' << r.institution << ',' << r.ct_path << ',' << r.pet_path << ',' << r.mask_path << ','
       << r.label << ',' << to_string(r.split) << '\n';
}

// ---------------------------------------------------------------------------
// Pipeline stages

/// Picks the axial slice with the largest GTV area from slice-aligned volumes.
inline Sample select_slice(const Tensor<float>& ct_volume, const Tensor<float>& pet_volume,
                           const Tensor<float>& mask_volume) {
  require_rank(ct_volume, 3, "select_slice");
  require_rank(pet_volume, 3, "select_slice");
  require_rank(mask_volume, 3, "select_slice");
  if (ct_volume.shape() != mask_volume.shape())
    throw ShapeError("shape", "select_slice: CT " + shape_str(ct_volume.shape()) + " vs mask " +
                                  shape_str(mask_volume.shape()));
  if (pet_volume.dim(0) != ct_volume.dim(0))
    throw ShapeError("depth", "select_slice: PET and CT volumes are not slice-aligned");
  for (float v : mask_volume.data())
    if (v != 0.0f && v != 1.0f) throw std::invalid_argument("select_slice: mask values must be 0 or 1");
  const std::size_t z = image::largest_mask_slice(mask_volume);
  Sample s;
  s.ct = image::extract_slice(ct_volume, z);
  s.pet = image::extract_slice(pet_volume, z);
  s.mask = image::extract_slice(mask_volume, z);
  return s;
}

/// Loads one manifest row. Rank-3 files are volumes and go through slice
/// selection; rank-2 files are already single slices.
inline Sample load_sample(const Manifest& m, const ManifestRow& row) {
  auto as_volume = [](Tensor<float> t) {
    if (t.rank() == 2) return t.reshaped({1, t.dim(0), t.dim(1)});
    require_rank(t, 3, "load_sample");
    return t;
  };
  Sample s = select_slice(as_volume(io::load_tensor(m.resolve(row.ct_path))),
                          as_volume(io::load_tensor(m.resolve(row.pet_path))),
                          as_volume(io::load_tensor(m.resolve(row.mask_path))));
  s.patient_id = row.patient_id;
  s.institution = row.institution;
  s.label = row.label;
  s.split = row.split;
  return s;
}

/// Fixed order: mask (MASKED_CT only) -> normalise per modality -> upscale
/// PET -> concatenate CT then PET. Returns [C, size, size].
inline Tensor<float> assemble_input(const Sample& s, Modality modality, std::size_t size) {
  auto to_size = [size](const Tensor<float>& img) { return image::resize_bilinear(img, size, size); };
  switch (modality) {
    case Modality::Ct: return to_size(image::normalize(s.ct));
    case Modality::MaskedCt: return to_size(image::normalize(image::apply_mask(s.ct, s.mask)));
    case Modality::Pet: return to_size(image::normalize(s.pet));
    case Modality::PetCt:
      return image::stack_channels(to_size(image::normalize(s.ct)), to_size(image::normalize(s.pet)));
  }
  throw std::invalid_argument("assemble_input: unknown modality");
}

// ---------------------------------------------------------------------------
// Class rebalancing

struct EpochEntry {
  std::size_t index;  // position in the input label list
  bool duplicate;     // oversampled copy; receives its own augmentation draw
};

/// Oversamples the minority class with replacement until both classes have
/// the majority count. Originals come first, in input order.
inline std::vector<EpochEntry> rebalance(const std::vector<int>& labels, std::uint64_t seed) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("rebalance: labels must be 0 or 1");
    by_class[labels[i]].push_back(i);
  }
  if (by_class[0].empty() || by_class[1].empty())
    throw std::invalid_argument("rebalance: both classes must be present");
  std::vector<EpochEntry> out;
  out.reserve(2 * std::max(by_class[0].size(), by_class[1].size()));
  for (std::size_t i = 0; i < labels.size(); ++i) out.push_back({i, false});
  const int minority = by_class[0].size() < by_class[1].size() ? 0 : 1;
  const auto& pool = by_class[minority];
  const std::size_t deficit = by_class[1 - minority].size() - pool.size();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (std::size_t k = 0; k < deficit; ++k) out.push_back({pool[pick(rng)], true});
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthOptions {
  std::size_t n = 8;
  std::size_t image_size = 64;
  std::uint64_t seed = 1;
  /// Number of label-1 samples; negative means half of n (rounded down).
  long positives = -1;
  /// Stratified fraction of each class assigned to the eval split.
  double eval_fraction = 0.0;
  std::size_t depth = 5;
};

inline constexpr const char* kInstitutions[4] = {"CHUM", "CHUS", "HGJ", "HMR"};

/// FNV-1a 64 over a file's bytes.
inline std::uint64_t file_checksum(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot open " + p.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (is) {
    is.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

/// Combined checksum of a manifest and every file it references.
inline std::uint64_t dataset_checksum(const std::filesystem::path& manifest_csv) {
  const Manifest m = read_manifest(manifest_csv);
  std::uint64_t h = file_checksum(manifest_csv);
  for (const auto& r : m.rows)
    for (const auto* p : {&r.ct_path, &r.pet_path, &r.mask_path}) h = (h ^ file_checksum(m.resolve(*p))) * 1099511628211ull;
  return h;
}

/// Writes label-correlated lesion phantoms (CT, low-resolution PET and GTV
/// mask volumes) plus `manifest.csv` into `dir`. Death cases carry larger
/// lesions with stronger uptake. Deterministic per seed.
inline Manifest synth_dataset(const std::filesystem::path& dir, const SynthOptions& opt) {
  if (opt.n < 2) throw std::invalid_argument("synth: n must be >= 2");
  if (opt.image_size < 16) throw std::invalid_argument("synth: image_size must be >= 16");
  const std::size_t n_pos = opt.positives < 0 ? opt.n / 2 : static_cast<std::size_t>(opt.positives);
  if (n_pos > opt.n) throw std::invalid_argument("synth: more positives than samples");
  std::filesystem::create_directories(dir);

  std::mt19937_64 master(opt.seed);
  std::vector<int> labels(opt.n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_pos), 1);
  std::shuffle(labels.begin(), labels.end(), master);

  // Stratified eval assignment: the last round(f * count) samples of each class.
  std::vector<Split> splits(opt.n, Split::Train);
  for (int c = 0; c < 2; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < opt.n; ++i)
      if (labels[i] == c) idx.push_back(i);
    const auto n_eval = static_cast<std::size_t>(std::llround(opt.eval_fraction * static_cast<double>(idx.size())));
    for (std::size_t k = idx.size() - std::min(n_eval, idx.size()); k < idx.size(); ++k) splits[idx[k]] = Split::Eval;
  }

  const std::size_t S = opt.image_size, D = opt.depth;
  const std::size_t P = std::max<std::size_t>(4, S / 4);  // PET native resolution
  Manifest m;
  m.base_dir = dir;
  for (std::size_t i = 0; i < opt.n; ++i) {
    std::seed_seq seq{static_cast<std::uint64_t>(opt.seed), static_cast<std::uint64_t>(i), std::uint64_t{0x5eed}};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.05);
    const bool death = labels[i] == 1;
    const double s = static_cast<double>(S);
    const double radius = (death ? 0.20 : 0.10) * s + (u(rng) - 0.5) * 0.04 * s;
    const double cx = s * (0.35 + 0.3 * u(rng)), cy = s * (0.35 + 0.3 * u(rng));
    const double zc = static_cast<double>(D - 1) * (0.25 + 0.5 * u(rng));
    const double uptake = (death ? 2.0 : 1.0) * (0.8 + 0.4 * u(rng));

    Tensor<float> ct({D, S, S}), mask({D, S, S}), pet({D, P, P});
    for (std::size_t z = 0; z < D; ++z) {
      const double dz = (static_cast<double>(z) - zc) / static_cast<double>(D);
      const double rz = radius * std::max(0.3, 1.0 - 1.5 * std::abs(dz));
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const double ex = (static_cast<double>(x) - s / 2) / (0.45 * s), ey = (static_cast<double>(y) - s / 2) / (0.4 * s);
          const bool body = ex * ex + ey * ey <= 1.0;
          const double r2 = (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx) +
                            (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy);
          const bool lesion = r2 <= rz * rz;
          const std::size_t k = (z * S + y) * S + x;
          ct[k] = static_cast<float>((body ? 0.3 : 0.0) + (lesion ? 0.4 : 0.0) + noise(rng));
          mask[k] = lesion ? 1.0f : 0.0f;
        }
      const double ps = static_cast<double>(P) / s;
      for (std::size_t y = 0; y < P; ++y)
        for (std::size_t x = 0; x < P; ++x) {
          const double px = (static_cast<double>(x) + 0.5) / ps, py = (static_cast<double>(y) + 0.5) / ps;
          const double r2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
          pet[(z * P + y) * P + x] =
              static_cast<float>(uptake * std::exp(-r2 / (2 * rz * rz)) + 0.1 + 0.5 * noise(rng));
        }
    }
    // Guarantee a non-empty GTV even for a tiny lesion.
    const auto zi = static_cast<std::size_t>(std::llround(zc));
    const auto cxi = std::min(S - 1, static_cast<std::size_t>(cx)), cyi = std::min(S - 1, static_cast<std::size_t>(cy));
    mask[(zi * S + cyi) * S + cxi] = 1.0f;

    std::ostringstream pid;
    pid << "SYN-" << std::setw(4) << std::setfill('0') << i;
    ManifestRow row{pid.str(), kInstitutions[i % 4], pid.str() + "_ct.tnsr", pid.str() + "_pet.tnsr",
                    pid.str() + "_mask.tnsr", labels[i], splits[i]};
    io::save_tensor(dir / row.ct_path, ct);
    io::save_tensor(dir / row.pet_path, pet);
    io::save_tensor(dir / row.mask_path, mask);
    m.rows.push_back(std::move(row));
  }
  write_manifest(dir / "manifest.csv", m);
  return m;
}

}  // namespace onconet
