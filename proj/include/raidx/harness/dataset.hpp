#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raidx/image.hpp"
#include "raidx/label.hpp"
#include "raidx/rng.hpp"

namespace raidx {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ArtifactKind { kNoiseBlock, kInvertedGradient };

inline std::string_view to_string(ArtifactKind k) {
  return k == ArtifactKind::kNoiseBlock ? "noise-block" : "inverted-gradient";
}

inline ArtifactKind parse_artifact_kind(std::string_view s) {
  if (s == "noise-block") return ArtifactKind::kNoiseBlock;
  if (s == "inverted-gradient") return ArtifactKind::kInvertedGradient;
  throw DataError("unknown artifact kind '" + std::string(s) + "'");
}

/// Half-open pixel box [row0, row1) × [col0, col1).
struct Box {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;

  std::size_t area() const { return (row1 - row0) * (col1 - col0); }
  bool contains(std::size_t r, std::size_t c) const {
    return r >= row0 && r < row1 && c >= col0 && c < col1;
  }
  friend bool operator==(const Box&, const Box&) = default;
};

struct SyntheticSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t n_train = 400;
  std::size_t n_test = 200;
  double fake_fraction = 0.5;
  ArtifactKind artifact = ArtifactKind::kNoiseBlock;
  std::size_t box_min = 8;   // side length range of the artifact box, pixels
  std::size_t box_max = 14;
  double artifact_amp_min = 0.08;
  double artifact_amp_max = 0.35;
  double base_noise = 0.01;  // low-amplitude noise on every image
  // Share of REAL images carrying texture over the whole frame, at the same
  // amplitude range as the artifacts.
  double textured_real_fraction = 0.0;
  // Share of FAKE images (per split) that are near-copies of a few recirculated
  // sources. Sources carry a faint artifact; each has copies in both splits.
  double recirculated_fraction = 0.2;
  std::size_t recirculated_sources = 4;
  double faint_amp = 0.015;

  void validate() const {
    if (height == 0 || width == 0) throw DataError("dataset: empty image size");
    if (box_min == 0 || box_min > box_max) throw DataError("dataset: bad box size range");
    if (box_max > height || box_max > width)
      throw DataError("dataset: artifact box larger than image");
    if (!(fake_fraction >= 0.0 && fake_fraction <= 1.0))
      throw DataError("dataset: fake_fraction outside [0, 1]");
    if (n_train == 0) throw DataError("dataset: n_train must be positive");
    if (!(textured_real_fraction >= 0.0 && textured_real_fraction <= 1.0))
      throw DataError("dataset: textured_real_fraction outside [0, 1]");
    if (!(recirculated_fraction >= 0.0 && recirculated_fraction <= 1.0))
      throw DataError("dataset: recirculated_fraction outside [0, 1]");
    if (recirculated_fraction > 0.0 && recirculated_sources == 0)
      throw DataError("dataset: recirculated_sources must be positive");
    if (artifact_amp_min < 0.0 || artifact_amp_min > artifact_amp_max)
      throw DataError("dataset: bad artifact amplitude range");
  }
};

enum class Split { kTrain, kTest };

struct Sample {
  std::size_t id = 0;
  Split split = Split::kTrain;
  Label label = Label::kReal;
  std::optional<Box> box;             // FAKE only
  std::optional<std::size_t> source;  // recirculated source, if a copy
  Image image;
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Sample> items;

  std::vector<const Sample*> split(Split s) const {
    std::vector<const Sample*> out;
    for (const auto& it : items)
      if (it.split == s) out.push_back(&it);
    return out;
  }
};

/// Smooth random gradient plus low-amplitude noise.
inline Image smooth_base(const SyntheticSpec& spec, Rng& rng) {
  Image img{spec.height, spec.width, std::vector<double>(spec.height * spec.width)};
  const double level = rng.uniform(0.3, 0.7);
  const double gx = rng.uniform(-0.4, 0.4), gy = rng.uniform(-0.4, 0.4);
  const double wave = rng.uniform(0.0, 0.08), phase = rng.uniform(0.0, 6.283185307179586);
  for (std::size_t r = 0; r < spec.height; ++r)
    for (std::size_t c = 0; c < spec.width; ++c) {
      const double y = static_cast<double>(r) / static_cast<double>(spec.height) - 0.5;
      const double x = static_cast<double>(c) / static_cast<double>(spec.width) - 0.5;
      const double v = level + gx * x + gy * y + wave * std::sin(3.0 * x + 2.0 * y + phase) +
                       spec.base_noise * rng.normal();
      img.at(r, c) = std::clamp(v, 0.0, 1.0);
    }
  return img;
}

inline Box sample_box(const SyntheticSpec& spec, Rng& rng) {
  const std::size_t span = spec.box_max - spec.box_min + 1;
  const std::size_t bh = spec.box_min + rng.below(span);
  const std::size_t bw = spec.box_min + rng.below(span);
  Box b;
  b.row0 = rng.below(spec.height - bh + 1);
  b.col0 = rng.below(spec.width - bw + 1);
  b.row1 = b.row0 + bh;
  b.col1 = b.col0 + bw;
  return b;
}

inline void plant_artifact(const SyntheticSpec& spec, Image& img, const Box& box, Rng& rng,
                           double amp) {
  for (std::size_t r = box.row0; r < box.row1; ++r)
    for (std::size_t c = box.col0; c < box.col1; ++c) {
      double& px = img.at(r, c);
      if (spec.artifact == ArtifactKind::kNoiseBlock)
        px = std::clamp(px + amp * rng.uniform(-1.0, 1.0), 0.0, 1.0);
      else
        px = std::clamp(1.0 - px, 0.0, 1.0);
    }
}

inline void add_texture(const SyntheticSpec& spec, Image& img, Rng& rng) {
  const double amp = rng.uniform(spec.artifact_amp_min, spec.artifact_amp_max);
  for (double& px : img.pixels) px = std::clamp(px + amp * rng.uniform(-1.0, 1.0), 0.0, 1.0);
}

/// A recirculated source: one base scene with a faint artifact at a fixed box.
struct RecirculatedSource {
  std::uint64_t scene_seed = 0;
  Box box;
};

inline std::vector<RecirculatedSource> recirculated_sources(const SyntheticSpec& spec,
                                                            std::uint64_t seed) {
  std::vector<RecirculatedSource> out;
  for (std::size_t s = 0; s < spec.recirculated_sources; ++s) {
    Rng rng(Rng::mix(seed, 500 + s));
    RecirculatedSource so;
    so.scene_seed = rng.next_u64();
    so.box = sample_box(spec, rng);
    out.push_back(so);
  }
  return out;
}

/// One generated item together with the image before any artifact was planted.
struct ItemDraw {
  Image base;
  Image image;
  std::optional<Box> box;
};

inline void quantize_f32(Image& img) {
  for (double& px : img.pixels) px = static_cast<double>(static_cast<float>(px));
}

/// Renders item `id`. Copies of a recirculated source share its scene, box and
/// artifact pattern; each copy re-draws the fine noise and shifts brightness.
inline ItemDraw draw_item(const SyntheticSpec& spec, std::uint64_t seed, std::size_t id,
                          Label label, const RecirculatedSource* source) {
  Rng rng(Rng::mix(seed, 1000 + id));
  ItemDraw d;
  if (source) {
    SyntheticSpec quiet = spec;
    quiet.base_noise = 0.0;
    Rng scene(source->scene_seed);
    d.base = smooth_base(quiet, scene);
    const double shift = rng.uniform(-0.005, 0.005);
    for (double& px : d.base.pixels)
      px = std::clamp(px + shift + spec.base_noise * rng.normal(), 0.0, 1.0);
    d.image = d.base;
    d.box = source->box;
    Rng pattern(Rng::mix(source->scene_seed, 7));
    plant_artifact(spec, d.image, *d.box, pattern, spec.faint_amp);
  } else {
    d.base = smooth_base(spec, rng);
    d.image = d.base;
    if (label == Label::kFake) {
      d.box = sample_box(spec, rng);
      plant_artifact(spec, d.image, *d.box, rng,
                     rng.uniform(spec.artifact_amp_min, spec.artifact_amp_max));
    } else if (rng.uniform() < spec.textured_real_fraction) {
      add_texture(spec, d.image, rng);
    }
  }
  quantize_f32(d.base);
  quantize_f32(d.image);
  return d;
}

/// Deterministic per seed. Each split holds exactly round(n·fake_fraction)
/// fakes in a seeded random order; the first round(fakes·recirculated_fraction)
/// fakes of each split are copies of the recirculated sources, dealt round-robin.
/// Pixels are rounded to float32 so a saved dataset reloads bit-identically.
inline Dataset generate_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset ds;
  ds.height = spec.height;
  ds.width = spec.width;
  Rng order_rng(Rng::mix(seed, 1));
  const auto sources = recirculated_sources(spec, seed);

  std::size_t next_id = 0;
  for (Split split : {Split::kTrain, Split::kTest}) {
    const std::size_t n = split == Split::kTrain ? spec.n_train : spec.n_test;
    const auto n_fake =
        static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.fake_fraction));
    const auto n_rec = static_cast<std::size_t>(
        std::llround(static_cast<double>(n_fake) * spec.recirculated_fraction));
    std::vector<Label> labels(n, Label::kReal);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_fake), Label::kFake);
    for (std::size_t i = n; i > 1; --i) std::swap(labels[i - 1], labels[order_rng.below(i)]);
    std::size_t fake_seen = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Sample s;
      s.id = next_id++;
      s.split = split;
      s.label = labels[i];
      if (s.label == Label::kFake && fake_seen < n_rec) s.source = fake_seen % sources.size();
      if (s.label == Label::kFake) ++fake_seen;
      auto d = draw_item(spec, seed, s.id, s.label, s.source ? &sources[*s.source] : nullptr);
      s.image = std::move(d.image);
      s.box = d.box;
      ds.items.push_back(std::move(s));
    }
  }
  return ds;
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) h = (h ^ c) * 0x100000001B3ULL;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

/// Writes `images.f32` (float32 LE grids, item order) and `manifest.json`.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string blob;
  blob.reserve(ds.items.size() * ds.height * ds.width * 4);
  for (const auto& it : ds.items)
    for (double p : it.image.pixels) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(p));
      for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  {
    std::ofstream out(dir / "images.f32", std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / "images.f32").string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
  nlohmann::json m;
  m["height"] = ds.height;
  m["width"] = ds.width;
  m["content_hash"] = hex64(fnv1a(blob));
  m["items"] = nlohmann::json::array();
  for (const auto& it : ds.items) {
    nlohmann::json j;
    j["id"] = it.id;
    j["split"] = it.split == Split::kTrain ? "train" : "test";
    j["label"] = std::string(to_string(it.label));
    if (it.box)
      j["box"] = {it.box->row0, it.box->col0, it.box->row1, it.box->col1};
    else
      j["box"] = nullptr;
    if (it.source)
      j["source"] = *it.source;
    else
      j["source"] = nullptr;
    m["items"].push_back(std::move(j));
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << m.dump(1) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError("missing " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    mf >> m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad manifest: ") + e.what());
  }
  std::ifstream bf(dir / "images.f32", std::ios::binary);
  if (!bf) throw DataError("missing " + (dir / "images.f32").string());
  const std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  try {
    if (m.at("content_hash").get<std::string>() != hex64(fnv1a(blob)))
      throw DataError("dataset content hash mismatch");
    Dataset ds;
    ds.height = m.at("height").get<std::size_t>();
    ds.width = m.at("width").get<std::size_t>();
    const std::size_t px = ds.height * ds.width;
    const auto& items = m.at("items");
    if (blob.size() != items.size() * px * 4) throw DataError("image blob size mismatch");
    std::size_t off = 0;
    for (const auto& j : items) {
      Sample s;
      s.id = j.at("id").get<std::size_t>();
      const auto split = j.at("split").get<std::string>();
      if (split != "train" && split != "test") throw DataError("bad split " + split);
      s.split = split == "train" ? Split::kTrain : Split::kTest;
      const auto label = parse_label(j.at("label").get<std::string>());
      if (!label) throw DataError("bad label in manifest");
      s.label = *label;
      if (!j.at("box").is_null()) {
        const auto b = j.at("box").get<std::vector<std::size_t>>();
        if (b.size() != 4) throw DataError("bad box in manifest");
        s.box = Box{b[0], b[1], b[2], b[3]};
      }
      if (j.contains("source") && !j.at("source").is_null())
        s.source = j.at("source").get<std::size_t>();
      if ((s.label == Label::kFake) != s.box.has_value())
        throw DataError("item " + std::to_string(s.id) + ": box presence does not match label");
      s.image = {ds.height, ds.width, std::vector<double>(px)};
      for (std::size_t i = 0; i < px; ++i, off += 4) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
          bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[off + b])) << (8 * b);
        s.image.pixels[i] = std::bit_cast<float>(bits);
      }
      try {
        s.image.validate();
      } catch (const ImageError& e) {
        throw DataError("item " + std::to_string(s.id) + ": " + e.what());
      }
      ds.items.push_back(std::move(s));
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad manifest: ") + e.what());
  }
}

}  // namespace raidx
