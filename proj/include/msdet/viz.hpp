#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "msdet/model.hpp"
#include "msdet/scenes.hpp"

namespace msdet {

struct Rgb {
  uint8_t r = 0, g = 0, b = 0;
};

inline Image to_rgb(const Image& img) {
  Image out(img.h, img.w, 3);
  for (size_t y = 0; y < img.h; ++y)
    for (size_t x = 0; x < img.w; ++x)
      for (size_t c = 0; c < 3; ++c)
        out.at(y, x, c) = img.ch == 3 ? img.at(y, x, c) : img.at(y, x, 0);
  return out;
}

inline void draw_point(Image& img, double px, double py, double radius, Rgb col) {
  const long r = std::max(1L, static_cast<long>(std::lround(radius)));
  const long cx = static_cast<long>(std::lround(px));
  const long cy = static_cast<long>(std::lround(py));
  for (long y = cy - r; y <= cy + r; ++y)
    for (long x = cx - r; x <= cx + r; ++x) {
      if (y < 0 || y >= static_cast<long>(img.h) || x < 0 ||
          x >= static_cast<long>(img.w))
        continue;
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) > r * r) continue;
      img.at(y, x, 0) = col.r;
      img.at(y, x, 1) = col.g;
      img.at(y, x, 2) = col.b;
    }
}

inline void draw_box(Image& img, const Box& box, Rgb col) {
  const long x0 = static_cast<long>(std::lround(box.x0() * img.w));
  const long x1 = static_cast<long>(std::lround(box.x1() * img.w)) - 1;
  const long y0 = static_cast<long>(std::lround(box.y0() * img.h));
  const long y1 = static_cast<long>(std::lround(box.y1() * img.h)) - 1;
  auto put = [&](long x, long y) {
    if (y < 0 || y >= static_cast<long>(img.h) || x < 0 ||
        x >= static_cast<long>(img.w))
      return;
    img.at(y, x, 0) = col.r;
    img.at(y, x, 1) = col.g;
    img.at(y, x, 2) = col.b;
  };
  for (long x = x0; x <= x1; ++x) {
    put(x, y0);
    put(x, y1);
  }
  for (long y = y0; y <= y1; ++y) {
    put(x0, y);
    put(x1, y);
  }
}

// Fig.-3-style overlay: selected query reference points on their provenance
// modality; the top `n_high` scorers in red with their boxes, the rest blue.
// Writes <out_prefix>_vis.ppm and <out_prefix>_ir.ppm.
inline void viz_queries(Model& model, const Image& visible, const Image& infrared,
                        const std::string& out_prefix, size_t n_high = 10) {
  Tape tape;
  ForwardResult fr = model.model_forward(tape, image_to_tensor(visible),
                                         image_to_tensor(infrared));
  Image overlays[2] = {to_rgb(visible), to_rgb(infrared)};
  const Tensor& scores = fr.sel_scores.val();
  const Tensor& boxes = fr.sel_boxes.val();
  std::vector<size_t> order(fr.sel_tokens.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return scores.data[a] > scores.data[b];
  });
  for (size_t rank = 0; rank < order.size(); ++rank) {
    const size_t i = order[rank];
    const TokenInfo& ti = fr.token_info[fr.sel_tokens[i]];
    const int mi = ti.modality == Modality::visible ? 0 : 1;
    Image& img = overlays[mi];
    const bool high = rank < n_high;
    const Rgb col = high ? Rgb{230, 30, 30} : Rgb{40, 80, 230};
    draw_point(img, boxes.data[i * 4] * img.w, boxes.data[i * 4 + 1] * img.h,
               high ? 2.0 : 1.0, col);
    if (high)
      draw_box(img, Box{boxes.data[i * 4], boxes.data[i * 4 + 1],
                        boxes.data[i * 4 + 2], boxes.data[i * 4 + 3]},
               Rgb{230, 30, 30});
  }
  write_pnm(overlays[0], out_prefix + "_vis.ppm");
  write_pnm(overlays[1], out_prefix + "_ir.ppm");
}

// Fig.-4-style overlay: per decoder layer and modality, the sampling points
// of one query, colored by semantic level (blue/green/red from low to high),
// radius and brightness scaled by attention weight. Returns written paths.
inline std::vector<std::string> viz_sampling(Model& model, const Image& visible,
                                             const Image& infrared,
                                             size_t query_index,
                                             const std::string& out_prefix) {
  const ModelConfig& cfg = model.config();
  MSDET_CHECK(query_index < cfg.num_queries, "viz_sampling: query index ",
              query_index, " out of range ", cfg.num_queries);
  Tape tape;
  ForwardResult fr = model.model_forward(tape, image_to_tensor(visible),
                                         image_to_tensor(infrared), nullptr,
                                         /*record_diags=*/true);
  const size_t M = cfg.attn_modalities();
  const size_t H = cfg.heads, L = cfg.levels, K = cfg.points;
  static const Rgb kLevelColors[3] = {
      {60, 90, 235}, {60, 210, 80}, {235, 50, 50}};
  std::vector<std::string> written;
  for (size_t d = 0; d < fr.diags.size(); ++d) {
    const SamplingDiag& diag = fr.diags[d];
    double wmax = 1e-12;
    for (size_t h = 0; h < H; ++h)
      for (size_t j = 0; j < M * L * K; ++j)
        wmax = std::max(wmax, diag.weights.data[(query_index * H + h) * M * L * K + j]);
    for (size_t m = 0; m < M; ++m) {
      const Image& base_img =
          (M == 2 && m == 1) ? infrared : (M == 2 ? visible : visible);
      Image img = to_rgb(base_img);
      const Tensor& anchors = diag.anchors;
      draw_box(img, Box{anchors.data[query_index * 4], anchors.data[query_index * 4 + 1],
                        anchors.data[query_index * 4 + 2], anchors.data[query_index * 4 + 3]},
               Rgb{250, 250, 250});
      for (size_t h = 0; h < H; ++h)
        for (size_t l = 0; l < L; ++l)
          for (size_t k = 0; k < K; ++k) {
            // points layout: [Nq x M x H x L x K x 2]
            const size_t pbase =
                ((((query_index * M + m) * H + h) * L + l) * K + k) * 2;
            const double x = diag.points.data[pbase] * img.w;
            const double y = diag.points.data[pbase + 1] * img.h;
            const double w =
                diag.weights.data[(query_index * H + h) * M * L * K + (m * L + l) * K + k];
            const double rel = w / wmax;
            Rgb col = kLevelColors[std::min<size_t>(l, 2)];
            col.r = static_cast<uint8_t>(col.r * (0.35 + 0.65 * rel));
            col.g = static_cast<uint8_t>(col.g * (0.35 + 0.65 * rel));
            col.b = static_cast<uint8_t>(col.b * (0.35 + 0.65 * rel));
            draw_point(img, x, y, 0.5 + 2.0 * rel, col);
          }
      const std::string path = out_prefix + "_layer" + std::to_string(d + 1) +
                               (M == 2 ? (m == 0 ? "_vis" : "_ir") : "_fused") +
                               ".ppm";
      write_pnm(img, path);
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace msdet
