#pragma once

// Image/mask dataset ingestion, deterministic splits and lossless export.
//
// On-disk layout: <root>/images/<id>.png and optional <root>/masks/<id>.png,
// plus <root>/manifest.csv with columns id,image_path,mask_path,domain_tag,checksum.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stylseg/data/image.hpp"
#include "stylseg/nn.hpp"

namespace stylseg {

struct Sample {
  std::string id;
  Image image;  // [3,H,W] in [0,1]
  std::optional<BinaryMask> mask;
  std::string domain_tag;
};

struct ManifestEntry {
  std::string id;
  std::string image_path;
  std::string mask_path;  // empty when absent
  std::string domain_tag;
  std::string checksum;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string checksum;

  std::string to_csv() const {
    std::ostringstream os;
    os << "id,image_path,mask_path,domain_tag,checksum\n";
    for (const auto& e : entries) {
      os << e.id << ',' << e.image_path << ',' << e.mask_path << ',' << e.domain_tag << ',' << e.checksum << '\n';
    }
    return os.str();
  }
};

/// Hash of the 8-bit content a sample would be stored as.
inline std::string sample_checksum(const Sample& s) {
  const Raster8 r = raster_from_image(s.image);
  const int dims[3] = {r.height, r.width, r.channels};
  std::uint64_t h = fnv1a64(dims, sizeof(dims));
  h = fnv1a64(r.pixels.data(), r.pixels.size(), h);
  if (s.mask) {
    const Raster8 m = raster_from_mask(*s.mask);
    h = fnv1a64(m.pixels.data(), m.pixels.size(), h ^ 0xA5A5A5A5ULL);
  }
  return hex64(h);
}

inline std::string manifest_checksum(const std::vector<ManifestEntry>& entries) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& e : entries) {
    const std::string line = e.id + '\x1f' + e.domain_tag + '\x1f' + e.checksum + '\n';
    h = fnv1a64(line.data(), line.size(), h);
  }
  return hex64(h);
}

namespace detail {
inline std::vector<std::filesystem::path> list_png(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}
}  // namespace detail

/// Loads <root>/images/*.png (and same-stem masks when <root>/masks exists),
/// resized to expected_size x expected_size. Samples are sorted by id.
inline std::vector<Sample> load_dataset(const std::string& root, int expected_size = 256,
                                        const std::string& domain_tag = "") {
  namespace fs = std::filesystem;
  if (expected_size < 1) throw InputError("expected_size must be positive");
  const fs::path images_dir = fs::path(root) / "images";
  if (!fs::is_directory(images_dir)) throw InputError("missing images directory '" + images_dir.string() + "'");
  const fs::path masks_dir = fs::path(root) / "masks";
  const bool has_masks = fs::is_directory(masks_dir);

  const auto files = detail::list_png(images_dir);
  if (files.empty()) throw InputError("no .png images in '" + images_dir.string() + "'");

  std::vector<Sample> samples;
  samples.reserve(files.size());
  for (const auto& f : files) {
    Sample s;
    s.id = f.stem().string();
    s.domain_tag = domain_tag;
    s.image = resize_bilinear(image_from_raster(read_png(f.string(), 3)), expected_size, expected_size);
    if (has_masks) {
      const fs::path mp = masks_dir / (s.id + ".png");
      if (fs::exists(mp)) {
        s.mask = resize_nearest(mask_from_raster(read_png(mp.string(), 1)), expected_size, expected_size);
      }
    }
    samples.push_back(std::move(s));
  }
  std::sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (samples[i].id == samples[i - 1].id) throw InputError("duplicate sample id '" + samples[i].id + "'");
  }
  return samples;
}

/// Writes samples losslessly as 8-bit PNGs plus manifest.csv. Paths in the
/// manifest are relative to out_dir. An empty input writes nothing.
inline DatasetManifest save_images(const std::vector<Sample>& samples, const std::string& out_dir) {
  namespace fs = std::filesystem;
  DatasetManifest manifest;
  if (samples.empty()) {
    manifest.checksum = manifest_checksum(manifest.entries);
    return manifest;
  }
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw InputError("cannot create '" + out_dir + "/images': " + ec.message());
  const bool any_mask = std::any_of(samples.begin(), samples.end(), [](const Sample& s) { return s.mask.has_value(); });
  if (any_mask) {
    fs::create_directories(fs::path(out_dir) / "masks", ec);
    if (ec) throw InputError("cannot create '" + out_dir + "/masks': " + ec.message());
  }
  for (const auto& s : samples) {
    if (s.id.empty() || s.id.find_first_of("/\\,") != std::string::npos) {
      throw InputError("sample id '" + s.id + "' is not a valid file stem");
    }
    ManifestEntry e;
    e.id = s.id;
    e.domain_tag = s.domain_tag;
    e.image_path = "images/" + s.id + ".png";
    write_png((fs::path(out_dir) / e.image_path).string(), raster_from_image(s.image));
    if (s.mask) {
      if (s.mask->height != s.image.dim(1) || s.mask->width != s.image.dim(2)) {
        throw InputError("sample '" + s.id + "': mask and image sizes differ");
      }
      e.mask_path = "masks/" + s.id + ".png";
      write_png((fs::path(out_dir) / e.mask_path).string(), raster_from_mask(*s.mask));
    }
    e.checksum = sample_checksum(s);
    manifest.entries.push_back(std::move(e));
  }
  manifest.checksum = manifest_checksum(manifest.entries);
  std::ofstream out(fs::path(out_dir) / "manifest.csv", std::ios::binary);
  if (!out) throw InputError("cannot write manifest in '" + out_dir + "'");
  out << manifest.to_csv();
  return manifest;
}

/// Deterministic disjoint cover of `items` into parts sized by `fractions`.
/// Each part keeps the original relative order.
template <typename Item>
std::vector<std::vector<Item>> split(const std::vector<Item>& items, const std::vector<double>& fractions,
                                     std::uint64_t seed) {
  if (items.empty()) throw InputError("split: empty input");
  if (fractions.empty()) throw InputError("split: no fractions");
  double total = 0;
  for (double f : fractions) {
    if (!(f > 0)) throw InputError("split: fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InputError("split: fractions must sum to 1");

  const std::size_t n = items.size();
  std::vector<std::size_t> sizes(fractions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    assigned += sizes[i];
    remainders.push_back({exact - static_cast<double>(sizes[i]), i});
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[remainders[k % remainders.size()].second];

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<Item>> parts(fractions.size());
  std::size_t pos = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    std::vector<std::size_t> idx(order.begin() + pos, order.begin() + pos + sizes[p]);
    pos += sizes[p];
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) parts[p].push_back(items[i]);
  }
  return parts;
}

}  // namespace stylseg
