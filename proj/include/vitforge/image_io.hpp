#pragma once

// PNG/JPEG decoding, labels.csv dataset directories and packed fixtures.
// Requires linking libpng and libjpeg.

#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "vitforge/checkpoint.hpp"
#include "vitforge/errors.hpp"
#include "vitforge/preprocess.hpp"

namespace vitforge::io {

namespace fs = std::filesystem;

inline RgbImage read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw FormatError("cannot decode PNG " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  RgbImage out(img.height, img.width);
  if (out.pixels.empty() ||
      !png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

inline void write_png(const fs::path& path, const RgbImage& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
}

namespace detail {
struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}
}  // namespace detail

inline RgbImage read_jpeg(const fs::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw IoError("cannot open " + path.string());
  jpeg_decompress_struct cinfo{};
  detail::JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_error_exit;
  RgbImage out;
  // No objects with non-trivial destructors may be created between setjmp and
  // the last libjpeg call below.
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError("cannot decode JPEG " + path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.height = cinfo.output_height;
  out.width = cinfo.output_width;
  out.pixels.resize(out.height * out.width * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + cinfo.output_scanline * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

// Decodes by content signature, not extension.
inline RgbImage read_image(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  if (in.gcount() >= 8 && png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  if (in.gcount() >= 3 && sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF)
    return read_jpeg(path);
  throw FormatError("unrecognized image format: " + path.string());
}

struct ManifestRow {
  std::string path;   // relative to the manifest's directory
  std::string label;  // class name
};

inline std::vector<ManifestRow> read_manifest(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw UsageError("cannot open label manifest " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(csv.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,label")
    throw FormatError(csv.string() + ": expected header 'path,label', got '" + line + "'");
  std::vector<ManifestRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos || comma == 0 || comma + 1 == line.size())
      throw FormatError(csv.string() + ":" + std::to_string(lineno) + ": malformed row");
    rows.push_back({line.substr(0, comma), line.substr(comma + 1)});
  }
  return rows;
}

inline void write_manifest(const fs::path& csv, const std::vector<ManifestRow>& rows) {
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw IoError("cannot write " + csv.string());
  out << "path,label\n";
  for (const auto& r : rows) out << r.path << ',' << r.label << '\n';
  if (!out) throw IoError("write failed for " + csv.string());
}

// Sorted unique class names of a manifest.
inline std::vector<std::string> class_names_of(const std::vector<ManifestRow>& rows) {
  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.label);
  return {names.begin(), names.end()};
}

// Loads a manifest; class ids follow `class_names` when given, otherwise the
// sorted unique labels of the manifest itself.
inline LabeledDataset load_manifest(const fs::path& csv,
                                    std::vector<std::string> class_names = {}) {
  const auto rows = read_manifest(csv);
  if (class_names.empty()) class_names = class_names_of(rows);
  std::map<std::string, std::int64_t> ids;
  for (std::size_t i = 0; i < class_names.size(); ++i)
    ids[class_names[i]] = static_cast<std::int64_t>(i);
  LabeledDataset ds;
  ds.num_classes = class_names.size();
  ds.class_names = std::move(class_names);
  const fs::path root = csv.parent_path();
  for (const auto& r : rows) {
    auto it = ids.find(r.label);
    if (it == ids.end())
      throw LabelError(csv.string() + ": unknown class '" + r.label + "' for " + r.path);
    ds.samples.push_back({read_image(root / r.path), it->second, r.path});
  }
  ds.validate();
  return ds;
}

// Manifest rows for a subset of a source manifest.
inline std::vector<ManifestRow> manifest_rows(const LabeledDataset& ds) {
  std::vector<ManifestRow> rows;
  for (const auto& s : ds.samples)
    rows.push_back({s.source_id, ds.class_names.at(static_cast<std::size_t>(s.label))});
  return rows;
}

// Packed fixture: a checkpoint container with `images` (n x 3 x S x S, f32) and
// `labels` (n, i64). Class names live in metadata["class_names"] when present.
inline void save_packed_fixture(const fs::path& path, const LabeledDataset& ds,
                                std::size_t side) {
  auto batch = assemble_batch<float>(ds, [&] {
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }(), side);
  std::vector<checkpoint::NamedTensor> tensors = {
      checkpoint::NamedTensor::from_tensor("images", batch.images),
      checkpoint::NamedTensor::from_values<std::int64_t>("labels", {ds.size()}, batch.labels)};
  checkpoint::save(path, tensors, {{"class_names", ds.class_names}});
}

inline LabeledDataset load_packed_fixture(const fs::path& path) {
  const auto ck = checkpoint::load(path);
  const auto& images = ck.at("images");
  const auto& labels_t = ck.at("labels");
  if (images.dtype != checkpoint::DType::kF32 || images.shape.size() != 4 ||
      images.shape[1] != 3 || images.shape[2] != images.shape[3])
    throw FormatError(path.string() + ": images must be f32 n x 3 x S x S");
  if (labels_t.dtype != checkpoint::DType::kI64 || labels_t.shape.size() != 1 ||
      labels_t.shape[0] != images.shape[0])
    throw FormatError(path.string() + ": labels must be i64 with one entry per image");
  const auto pixels = images.values<float>();
  const auto labels = labels_t.values<std::int64_t>();
  const std::size_t n = images.shape[0], side = images.shape[2];
  LabeledDataset ds;
  if (ck.metadata.contains("class_names")) {
    ds.class_names = ck.metadata["class_names"].get<std::vector<std::string>>();
  } else {
    std::int64_t mx = -1;
    for (auto l : labels) mx = std::max(mx, l);
    for (std::int64_t c = 0; c <= mx; ++c) ds.class_names.push_back("class" + std::to_string(c));
  }
  ds.num_classes = ds.class_names.size();
  for (std::size_t i = 0; i < n; ++i) {
    RgbImage img(side, side);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
          const float v = pixels[((i * 3 + c) * side + y) * side + x];
          if (!(v >= 0.f && v <= 1.f))
            throw FormatError(path.string() + ": pixel outside [0, 1] in image " + std::to_string(i));
          img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.f));
        }
    ds.samples.push_back({std::move(img), labels[i], "fixture:" + std::to_string(i)});
  }
  ds.validate();
  return ds;
}

// A dataset source: a directory with labels.csv, a manifest .csv, or a packed
// fixture file.
inline LabeledDataset load_dataset(const fs::path& path,
                                   std::vector<std::string> class_names = {}) {
  if (fs::is_directory(path)) {
    const fs::path csv = path / "labels.csv";
    if (!fs::exists(csv)) throw UsageError("missing labels.csv in " + path.string());
    return load_manifest(csv, std::move(class_names));
  }
  if (!fs::exists(path)) throw UsageError("dataset path does not exist: " + path.string());
  if (path.extension() == ".csv") return load_manifest(path, std::move(class_names));
  auto ds = load_packed_fixture(path);
  if (!class_names.empty()) {
    if (class_names.size() < ds.num_classes)
      throw LabelError(path.string() + ": fixture has more classes than expected");
    ds.class_names = std::move(class_names);
    ds.num_classes = ds.class_names.size();
  }
  return ds;
}

}  // namespace vitforge::io
