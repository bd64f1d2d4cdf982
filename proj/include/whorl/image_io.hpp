#pragma once

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"

#include "whorl/error.hpp"
#include "whorl/io/bytes.hpp"
#include "whorl/projection.hpp"

namespace whorl {

/// BGRA view copy of an RGBA section raster.
inline cv::Mat to_bgra_mat(const SectionImage& image) {
  cv::Mat rgba(image.meta.height_px, image.meta.width_px, CV_8UC4, const_cast<std::uint8_t*>(image.rgba.data()));
  cv::Mat bgra;
  cv::cvtColor(rgba, bgra, cv::COLOR_RGBA2BGRA);
  return bgra;
}

/// Section raster composited over white, as 8-bit BGR.
inline cv::Mat to_composited_bgr(const SectionImage& image) {
  cv::Mat out(image.meta.height_px, image.meta.width_px, CV_8UC3);
  const auto* src = image.rgba.data();
  for (int r = 0; r < out.rows; ++r) {
    auto* dst = out.ptr<cv::Vec3b>(r);
    for (int c = 0; c < out.cols; ++c, src += 4) {
      const unsigned a = src[3];
      for (int k = 0; k < 3; ++k)
        dst[c][2 - k] = static_cast<std::uint8_t>((src[k] * a + 255u * (255u - a) + 127u) / 255u);
    }
  }
  return out;
}

inline const std::vector<int>& png_params() {
  static const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 3};
  return params;
}

inline void write_png(const std::filesystem::path& path, const cv::Mat& mat) {
  if (!cv::imwrite(path.string(), mat, png_params())) throw IoError("cannot write PNG '" + path.string() + "'");
}

inline std::vector<std::byte> encode_png(const SectionImage& image) {
  std::vector<uchar> buf;
  if (!cv::imencode(".png", to_bgra_mat(image), buf, png_params())) throw Error("PNG encoding failed");
  std::vector<std::byte> out(buf.size());
  std::memcpy(out.data(), buf.data(), buf.size());
  return out;
}

inline void write_sidecar(const std::filesystem::path& path, const ImageMeta& meta) {
  io::write_file_text(path, nlohmann::json(meta).dump(2) + "\n");
}

inline ImageMeta read_sidecar(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(io::read_file_text(path)).get<ImageMeta>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what());
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

struct WrittenImage {
  std::filesystem::path png;
  std::filesystem::path sidecar;
};

/// Writes <stem>.png and <stem>.json into `dir`.
inline WrittenImage write_section_image(const std::filesystem::path& dir, const SectionImage& image) {
  const auto stem = image_stem(image.meta);
  WrittenImage out{dir / (stem + ".png"), dir / (stem + ".json")};
  io::write_file_bytes(out.png, encode_png(image));
  write_sidecar(out.sidecar, image.meta);
  return out;
}

/// Loads a PNG plus the sidecar sharing its stem.
inline SectionImage read_section_image(const std::filesystem::path& png) {
  auto sidecar = png;
  sidecar.replace_extension(".json");
  SectionImage img;
  img.meta = read_sidecar(sidecar);
  cv::Mat mat = cv::imread(png.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw IoError("cannot read PNG '" + png.string() + "'");
  if (mat.cols != img.meta.width_px || mat.rows != img.meta.height_px)
    throw SchemaError(png.string() + ": size does not match its sidecar");
  cv::Mat rgba;
  switch (mat.channels()) {
    case 4: cv::cvtColor(mat, rgba, cv::COLOR_BGRA2RGBA); break;
    case 3: cv::cvtColor(mat, rgba, cv::COLOR_BGR2RGBA); break;
    case 1: cv::cvtColor(mat, rgba, cv::COLOR_GRAY2RGBA); break;
    default: throw SchemaError(png.string() + ": unsupported channel count");
  }
  if (rgba.depth() != CV_8U) throw SchemaError(png.string() + ": expected 8-bit channels");
  img.rgba.assign(rgba.datastart, rgba.dataend);
  return img;
}

}  // namespace whorl
