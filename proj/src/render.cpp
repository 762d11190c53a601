// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mhaseg/error.hpp"
#include "mhaseg/io_util.hpp"

namespace mhaseg::render {

std::vector<std::byte> encode_ppm(std::size_t width, std::size_t height, std::span<const Rgb> pixels) {
  if (pixels.size() != width * height) {
    fail(ErrorCode::ShapeMismatch, "ppm of " + std::to_string(width) + "x" + std::to_string(height) + " given " +
                                       std::to_string(pixels.size()) + " pixels");
  }
  io::ByteWriter w;
  w.put_string("P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n");
  for (const Rgb& p : pixels) {
    w.put(p.r);
    w.put(p.g);
    w.put(p.b);
  }
  return w.bytes();
}

std::vector<Rgb> overlay_slice(const FloatGrid& image, const LabelGrid& labels, std::size_t z, std::size_t channel) {
  if (image.extent != labels.extent) {
    fail(ErrorCode::ShapeMismatch, "overlay image " + image.extent.str() + " vs labels " + labels.extent.str());
  }
  if (channel >= image.channels || z >= image.extent.depth) {
    fail(ErrorCode::ShapeMismatch, "overlay slice or channel out of range");
  }
  const auto [D, H, W] = image.extent;
  std::vector<Rgb> px(H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const float v = std::clamp(image.at(channel, z, y, x), 0.0F, 1.0F);
      const auto gray = static_cast<std::uint8_t>(std::lround(v * 255.0F));
      const auto label = labels.at(0, z, y, x);
      Rgb& p = px[y * W + x];
      if (label == 0 || label >= kNumClasses) {
        p = {gray, gray, gray};
        continue;
      }
      const Rgb c = kPalette[label];
      auto mix = [gray](std::uint8_t a) { return static_cast<std::uint8_t>((gray + a + 1) / 2); };
      p = {mix(c.r), mix(c.g), mix(c.b)};
    }
  }
  return px;
}

std::size_t write_overlays(const std::filesystem::path& dir, const FloatGrid& image, const LabelGrid& labels,
                           std::size_t channel) {
  for (std::size_t z = 0; z < image.extent.depth; ++z) {
    char name[32];
    std::snprintf(name, sizeof name, "slice_%03zu.ppm", z);
    io::write_file(dir / name, encode_ppm(image.extent.width, image.extent.height,
                                          overlay_slice(image, labels, z, channel)));
  }
  return image.extent.depth;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& y_label, std::span<const Series> series) {
  constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;
  std::size_t n = 0;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto px = [&](std::size_t i) { return kLeft + (n > 1 ? pw * static_cast<double>(i) / static_cast<double>(n - 1) : pw / 2); };
  auto py = [&](double v) { return kTop + ph * (hi - v) / (hi - lo); };

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + fmt(kW) + "\" height=\"" + fmt(kH) +
         "\" viewBox=\"0 0 " + fmt(kW) + " " + fmt(kH) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + fmt(kW / 2) + "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" +
         escape(title) + "</text>\n";
  svg += "<line x1=\"" + fmt(kLeft) + "\" y1=\"" + fmt(kTop + ph) + "\" x2=\"" + fmt(kLeft + pw) + "\" y2=\"" +
         fmt(kTop + ph) + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + fmt(kLeft) + "\" y1=\"" + fmt(kTop) + "\" x2=\"" + fmt(kLeft) + "\" y2=\"" + fmt(kTop + ph) +
         "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    svg += "<text x=\"" + fmt(kLeft - 6) + "\" y=\"" + fmt(py(v) + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + fmt(v) + "</text>\n";
  }
  svg += "<text x=\"" + fmt(kLeft + pw / 2) + "\" y=\"" + fmt(kH - 12) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">Epoch</text>\n";
  svg += "<text x=\"16\" y=\"" + fmt(kTop + ph / 2) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" " +
         "font-size=\"12\" transform=\"rotate(-90 16 " + fmt(kTop + ph / 2) + ")\">" + escape(y_label) + "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& sr = series[s];
    svg += "<polyline fill=\"none\" stroke=\"" + escape(sr.colour) + "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < sr.values.size(); ++i) {
      if (i) svg += " ";
      svg += fmt(px(i)) + "," + fmt(py(sr.values[i]));
    }
    svg += "\"/>\n";
    const double ly = kTop + 14 + 16 * static_cast<double>(s);
    svg += "<line x1=\"" + fmt(kLeft + pw - 150) + "\" y1=\"" + fmt(ly - 4) + "\" x2=\"" + fmt(kLeft + pw - 130) +
           "\" y2=\"" + fmt(ly - 4) + "\" stroke=\"" + escape(sr.colour) + "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + fmt(kLeft + pw - 124) + "\" y=\"" + fmt(ly) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" + escape(sr.name) + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace mhaseg::render
