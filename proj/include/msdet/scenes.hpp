#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "msdet/boxes.hpp"
#include "msdet/loss.hpp"
#include "msdet/rng.hpp"

namespace msdet {

enum class Visibility { full, partial, absent };

inline const char* visibility_name(Visibility v) {
  switch (v) {
    case Visibility::full: return "full";
    case Visibility::partial: return "partial";
    default: return "absent";
  }
}

// 8-bit interleaved image.
struct Image {
  size_t h = 0, w = 0, ch = 0;
  std::vector<uint8_t> px;

  Image() = default;
  Image(size_t h_, size_t w_, size_t ch_) : h(h_), w(w_), ch(ch_), px(h_ * w_ * ch_, 0) {}
  uint8_t& at(size_t y, size_t x, size_t c) { return px[(y * w + x) * ch + c]; }
  uint8_t at(size_t y, size_t x, size_t c) const { return px[(y * w + x) * ch + c]; }
};

struct SceneObject {
  size_t class_id = 0;              // 0 disc, 1 square, 2 triangle, 3 bar
  Box box;                          // true normalized box (shared annotation)
  Visibility vis[2] = {Visibility::full, Visibility::full};   // per modality
  double shift_x[2] = {0, 0};       // per-modality misalignment, normalized
  double shift_y[2] = {0, 0};
  uint64_t appearance_seed = 0;
};

struct SceneSpec {
  size_t image_size = 64;
  uint64_t background_seed[2] = {0, 0};
  std::vector<SceneObject> objects;
};

struct GenParams {
  size_t image_size = 64;
  size_t min_objects = 1, max_objects = 3;
  double min_size = 0.18, max_size = 0.40;
  double max_overlap_iou = 0.15;
  // Visibility mix: full-in-both / partial-in-one / absent-in-one.
  double p_full = 0.4, p_partial = 0.3, p_absent = 0.3;
  double max_shift = 0.03;
  size_t placement_retries = 200;
};

inline constexpr size_t kNumShapeClasses = 4;

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

inline SceneSpec generate_scene(const GenParams& p, uint64_t seed,
                                size_t scene_index) {
  MSDET_CHECK(p.min_objects >= 1 && p.max_objects >= p.min_objects,
              "generate_scene: bad object count range");
  const double mix_sum = p.p_full + p.p_partial + p.p_absent;
  MSDET_CHECK(mix_sum > 0, "generate_scene: visibility mix sums to zero");
  Rng rng(seed, 0x5CE4E + scene_index * 2654435761ULL);
  SceneSpec spec;
  spec.image_size = p.image_size;
  spec.background_seed[0] = rng.next_u64();
  spec.background_seed[1] = rng.next_u64();
  const size_t n_obj = p.min_objects + rng.below(p.max_objects - p.min_objects + 1);
  for (size_t i = 0; i < n_obj; ++i) {
    SceneObject obj;
    obj.class_id = rng.below(kNumShapeClasses);
    bool placed = false;
    for (size_t attempt = 0; attempt < p.placement_retries; ++attempt) {
      Box b;
      b.w = rng.uniform(p.min_size, p.max_size);
      b.h = rng.uniform(p.min_size, p.max_size);
      const double mx = p.max_shift + 0.01;
      b.cx = rng.uniform(b.w / 2 + mx, 1.0 - b.w / 2 - mx);
      b.cy = rng.uniform(b.h / 2 + mx, 1.0 - b.h / 2 - mx);
      bool ok = true;
      for (const SceneObject& prev : spec.objects)
        if (iou(b, prev.box) > p.max_overlap_iou) ok = false;
      if (!ok) continue;
      obj.box = b;
      placed = true;
      break;
    }
    if (!placed)
      fail("generate_scene: could not place object ", i, " in scene ",
           scene_index, " after ", p.placement_retries, " retries");

    const double u = rng.uniform() * mix_sum;
    const size_t affected = rng.below(2);  // which modality is degraded
    if (u < p.p_full) {
      obj.vis[0] = obj.vis[1] = Visibility::full;
    } else if (u < p.p_full + p.p_partial) {
      obj.vis[affected] = Visibility::partial;
      obj.vis[1 - affected] = Visibility::full;
    } else {
      obj.vis[affected] = Visibility::absent;
      obj.vis[1 - affected] = Visibility::full;
    }
    for (int m = 0; m < 2; ++m) {
      obj.shift_x[m] = rng.uniform(-p.max_shift, p.max_shift);
      obj.shift_y[m] = rng.uniform(-p.max_shift, p.max_shift);
    }
    obj.appearance_seed = rng.next_u64();
    spec.objects.push_back(obj);
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {

// True if (x, y) in pixel units lies inside the class shape within `b` (pixel
// box corners x0,y0,x1,y1).
inline bool shape_covers(size_t class_id, double x, double y, double x0,
                         double y0, double x1, double y1) {
  const double w = x1 - x0, h = y1 - y0;
  if (w <= 0 || h <= 0) return false;
  const double u = (x - x0) / w, v = (y - y0) / h;  // [0,1] box coords
  if (u < 0 || u > 1 || v < 0 || v > 1) return false;
  switch (class_id) {
    case 0:  // disc (inscribed ellipse)
      return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case 1:  // square
      return true;
    case 2:  // triangle, apex up
      return v >= 0.0 && std::fabs(u - 0.5) <= 0.5 * v;
    default:  // bar: thick diagonal stripe corner to corner
      return std::fabs(v - u) <= 0.28;
  }
}

inline double smooth_noise(Rng&, const std::vector<double>& grid, size_t gn,
                           double fx, double fy) {
  const double gx = fx * static_cast<double>(gn - 1);
  const double gy = fy * static_cast<double>(gn - 1);
  const size_t x0 = std::min(static_cast<size_t>(gx), gn - 2);
  const size_t y0 = std::min(static_cast<size_t>(gy), gn - 2);
  const double tx = gx - static_cast<double>(x0), ty = gy - static_cast<double>(y0);
  const double a = grid[y0 * gn + x0], b = grid[y0 * gn + x0 + 1];
  const double c = grid[(y0 + 1) * gn + x0], d = grid[(y0 + 1) * gn + x0 + 1];
  return (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
}

}  // namespace detail

// Renders one modality. Visible is 3-channel with class-dependent colors;
// infrared is 1-channel with objects bright-on-dark regardless of class.
// When `coverage` is non-null it receives, per object, the full (pre-
// occlusion) drawn-pixel mask, one image-sized byte mask per object.
inline Image render_modality(const SceneSpec& spec, Modality modality,
                             std::vector<std::vector<uint8_t>>* coverage = nullptr) {
  const int mi = modality == Modality::visible ? 0 : 1;
  const size_t S = spec.image_size;
  const size_t ch = modality == Modality::visible ? 3 : 1;
  Image img(S, S, ch);

  Rng bg_rng(spec.background_seed[mi], 0xB6);
  const size_t gn = 7;
  std::vector<std::vector<double>> grids(ch, std::vector<double>(gn * gn));
  for (size_t c = 0; c < ch; ++c)
    for (double& v : grids[c])
      v = modality == Modality::visible ? bg_rng.uniform(70, 150)
                                        : bg_rng.uniform(20, 70);
  // Modality-specific clutter blobs at background-like contrast.
  struct Blob { double cx, cy, r, amp; };
  std::vector<Blob> blobs;
  const size_t n_blobs = 3 + bg_rng.below(4);
  for (size_t i = 0; i < n_blobs; ++i)
    blobs.push_back(Blob{bg_rng.uniform(0, 1), bg_rng.uniform(0, 1),
                         bg_rng.uniform(0.03, 0.10), bg_rng.uniform(-25, 25)});

  std::vector<double> buf(S * S * ch);
  for (size_t y = 0; y < S; ++y)
    for (size_t x = 0; x < S; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(S);
      const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(S);
      for (size_t c = 0; c < ch; ++c) {
        double v = detail::smooth_noise(bg_rng, grids[c], gn, fx, fy);
        for (const Blob& b : blobs) {
          const double d2 = (fx - b.cx) * (fx - b.cx) + (fy - b.cy) * (fy - b.cy);
          if (d2 < b.r * b.r) v += b.amp * (1.0 - std::sqrt(d2) / b.r);
        }
        buf[(y * S + x) * ch + c] = v;
      }
    }

  if (coverage) coverage->assign(spec.objects.size(), std::vector<uint8_t>(S * S, 0));

  static const double kClassColors[kNumShapeClasses][3] = {
      {225, 60, 60}, {60, 200, 70}, {70, 90, 230}, {230, 200, 50}};
  for (size_t oi = 0; oi < spec.objects.size(); ++oi) {
    const SceneObject& obj = spec.objects[oi];
    Rng arng(obj.appearance_seed, 0xA0 + mi);
    // occluded half for partial visibility: 0 left, 1 right, 2 top, 3 bottom
    const size_t occ_half = arng.below(4);
    const double jitter = arng.uniform(0.85, 1.15);
    const Box& b = obj.box;
    const double px0 = (b.x0() + obj.shift_x[mi]) * static_cast<double>(S);
    const double px1 = (b.x1() + obj.shift_x[mi]) * static_cast<double>(S);
    const double py0 = (b.y0() + obj.shift_y[mi]) * static_cast<double>(S);
    const double py1 = (b.y1() + obj.shift_y[mi]) * static_cast<double>(S);
    const bool drawn = obj.vis[mi] != Visibility::absent;
    for (long y = std::max(0L, static_cast<long>(std::floor(py0)));
         y <= std::min(static_cast<long>(S) - 1, static_cast<long>(std::ceil(py1))); ++y)
      for (long x = std::max(0L, static_cast<long>(std::floor(px0)));
           x <= std::min(static_cast<long>(S) - 1, static_cast<long>(std::ceil(px1))); ++x) {
        const double cx = static_cast<double>(x) + 0.5;
        const double cy = static_cast<double>(y) + 0.5;
        if (!detail::shape_covers(obj.class_id, cx, cy, px0, py0, px1, py1))
          continue;
        if (coverage && drawn) (*coverage)[oi][y * S + x] = 1;
        if (!drawn) continue;
        if (obj.vis[mi] == Visibility::partial) {
          const double mid_x = 0.5 * (px0 + px1), mid_y = 0.5 * (py0 + py1);
          const bool occluded = (occ_half == 0 && cx < mid_x) ||
                                (occ_half == 1 && cx >= mid_x) ||
                                (occ_half == 2 && cy < mid_y) ||
                                (occ_half == 3 && cy >= mid_y);
          if (occluded) continue;  // stays at background level
        }
        for (size_t c = 0; c < ch; ++c) {
          const double val = modality == Modality::visible
                                 ? kClassColors[obj.class_id][c] * jitter
                                 : 235.0 * jitter;
          buf[(y * S + x) * ch + c] = val;
        }
      }
  }

  for (size_t i = 0; i < buf.size(); ++i)
    img.px[i] = static_cast<uint8_t>(std::min(255.0, std::max(0.0, buf[i])));
  return img;
}

// ---------------------------------------------------------------------------
// PPM / PGM I/O
// ---------------------------------------------------------------------------

inline void write_pnm(const Image& img, const std::string& path) {
  MSDET_CHECK(img.ch == 1 || img.ch == 3, "write_pnm: channels must be 1 or 3");
  std::ofstream f(path, std::ios::binary);
  MSDET_CHECK(f.good(), "cannot open for write: ", path);
  f << (img.ch == 3 ? "P6" : "P5") << "\n" << img.w << " " << img.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.px.data()),
          static_cast<std::streamsize>(img.px.size()));
  MSDET_CHECK(f.good(), "write failed: ", path);
}

inline Image read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  MSDET_CHECK(f.good(), "cannot open: ", path);
  auto parse_fail = [&](const std::string& what) {
    fail(path, ": parse error at byte ", static_cast<long>(f.tellg()), ": ", what);
  };
  std::string magic;
  f >> magic;
  if (magic != "P6" && magic != "P5") parse_fail("bad magic '" + magic + "'");
  size_t w = 0, h = 0, maxv = 0;
  f >> w >> h >> maxv;
  if (!f.good() || w == 0 || h == 0) parse_fail("bad dimensions");
  if (maxv != 255) parse_fail("unsupported max value");
  f.get();  // single whitespace after header
  Image img(h, w, magic == "P6" ? 3 : 1);
  f.read(reinterpret_cast<char*>(img.px.data()),
         static_cast<std::streamsize>(img.px.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.px.size()))
    parse_fail("truncated pixel data");
  return img;
}

// Integer-pixel translation with replicated edges; (dx, dy) move content
// right/down.
inline Image translate_image(const Image& img, int dx, int dy) {
  Image out(img.h, img.w, img.ch);
  const int h = static_cast<int>(img.h), w = static_cast<int>(img.w);
  for (int y = 0; y < h; ++y) {
    const int sy = std::clamp(y - dy, 0, h - 1);
    for (int x = 0; x < w; ++x) {
      const int sx = std::clamp(x - dx, 0, w - 1);
      for (size_t c = 0; c < img.ch; ++c)
        out.at(static_cast<size_t>(y), static_cast<size_t>(x), c) =
            img.at(static_cast<size_t>(sy), static_cast<size_t>(sx), c);
    }
  }
  return out;
}

// Model-input conversion: [H x W x ch] doubles scaled to [0, 1].
inline Tensor image_to_tensor(const Image& img) {
  Tensor t({img.h, img.w, img.ch});
  for (size_t i = 0; i < img.px.size(); ++i)
    t.data[i] = static_cast<double>(img.px[i]) / 255.0;
  return t;
}

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

struct SceneRecord {
  std::string vis_file, ir_file;
  GroundTruthSet gt;
};

struct DatasetManifest {
  std::string split;
  uint64_t seed = 0;
  GenParams params;
  std::vector<SceneRecord> scenes;
};

inline std::string scene_basename(size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", index);
  return buf;
}

// Generates, renders, and writes a full split under root/split. Returns the
// manifest (also written to root/split/manifest.txt).
inline DatasetManifest write_dataset(const std::string& root,
                                     const std::string& split,
                                     const GenParams& params, uint64_t seed,
                                     size_t count) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(root) / split;
  fs::create_directories(dir);
  DatasetManifest man;
  man.split = split;
  man.seed = seed;
  man.params = params;
  for (size_t i = 0; i < count; ++i) {
    SceneSpec spec = generate_scene(params, seed, i);
    SceneRecord rec;
    rec.vis_file = scene_basename(i) + "_vis.ppm";
    rec.ir_file = scene_basename(i) + "_ir.pgm";
    write_pnm(render_modality(spec, Modality::visible), (dir / rec.vis_file).string());
    write_pnm(render_modality(spec, Modality::infrared), (dir / rec.ir_file).string());
    for (const SceneObject& o : spec.objects)
      rec.gt.push_back(GtObject{o.class_id, o.box});
    man.scenes.push_back(std::move(rec));
  }
  std::ofstream f(dir / "manifest.txt");
  MSDET_CHECK(f.good(), "cannot write manifest under ", dir.string());
  f << "split=" << split << "\nseed=" << seed << "\ncount=" << count << "\n";
  f << "image_size=" << params.image_size << "\nmax_shift=" << params.max_shift
    << "\nmix=" << params.p_full << "," << params.p_partial << "," << params.p_absent
    << "\n";
  for (size_t i = 0; i < man.scenes.size(); ++i) {
    const SceneRecord& r = man.scenes[i];
    f << "scene=" << i << " vis=" << r.vis_file << " ir=" << r.ir_file
      << " nobj=" << r.gt.size() << "\n";
    for (const GtObject& o : r.gt)
      f << "obj class=" << o.class_id << " box=" << o.box.cx << "," << o.box.cy
        << "," << o.box.w << "," << o.box.h << "\n";
  }
  MSDET_CHECK(f.good(), "manifest write failed under ", dir.string());
  return man;
}

struct Sample {
  Image visible, infrared;
  GroundTruthSet gt;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
};

inline Dataset read_dataset(const std::string& root, const std::string& split) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(root) / split;
  const std::string mpath = (dir / "manifest.txt").string();
  std::ifstream f(mpath);
  MSDET_CHECK(f.good(), "cannot open manifest: ", mpath);
  Dataset ds;
  std::string line;
  size_t lineno = 0;
  auto kv = [&](const std::string& l, const std::string& key) -> std::string {
    MSDET_CHECK(l.rfind(key + "=", 0) == 0, mpath, ":", lineno,
                ": expected '", key, "=...', got '", l, "'");
    return l.substr(key.size() + 1);
  };
  std::getline(f, line); lineno++;
  ds.manifest.split = kv(line, "split");
  std::getline(f, line); lineno++;
  ds.manifest.seed = std::stoull(kv(line, "seed"));
  std::getline(f, line); lineno++;
  const size_t count = std::stoul(kv(line, "count"));
  std::getline(f, line); lineno++;
  ds.manifest.params.image_size = std::stoul(kv(line, "image_size"));
  std::getline(f, line); lineno++;
  ds.manifest.params.max_shift = std::stod(kv(line, "max_shift"));
  std::getline(f, line); lineno++;
  (void)kv(line, "mix");
  while (std::getline(f, line)) {
    lineno++;
    if (line.empty()) continue;
    if (line.rfind("scene=", 0) == 0) {
      SceneRecord rec;
      std::istringstream is(line);
      std::string tok;
      while (is >> tok) {
        if (tok.rfind("vis=", 0) == 0) rec.vis_file = tok.substr(4);
        else if (tok.rfind("ir=", 0) == 0) rec.ir_file = tok.substr(3);
      }
      MSDET_CHECK(!rec.vis_file.empty() && !rec.ir_file.empty(), mpath, ":",
                  lineno, ": scene line missing files");
      ds.manifest.scenes.push_back(rec);
    } else if (line.rfind("obj ", 0) == 0) {
      MSDET_CHECK(!ds.manifest.scenes.empty(), mpath, ":", lineno,
                  ": obj line before any scene");
      GtObject o;
      std::istringstream is(line.substr(4));
      std::string tok;
      while (is >> tok) {
        if (tok.rfind("class=", 0) == 0) o.class_id = std::stoul(tok.substr(6));
        else if (tok.rfind("box=", 0) == 0) {
          double v[4];
          if (std::sscanf(tok.c_str() + 4, "%lf,%lf,%lf,%lf", &v[0], &v[1],
                          &v[2], &v[3]) != 4)
            fail(mpath, ":", lineno, ": bad box '", tok, "'");
          o.box = Box{v[0], v[1], v[2], v[3]};
        }
      }
      ds.manifest.scenes.back().gt.push_back(o);
    } else {
      fail(mpath, ":", lineno, ": unrecognized line '", line, "'");
    }
  }
  MSDET_CHECK(ds.manifest.scenes.size() == count, mpath, ": manifest lists ",
              ds.manifest.scenes.size(), " scenes, header says ", count);
  for (const SceneRecord& rec : ds.manifest.scenes) {
    Sample s;
    const std::string vp = (dir / rec.vis_file).string();
    const std::string ip = (dir / rec.ir_file).string();
    MSDET_CHECK(fs::exists(vp), mpath, ": missing image file ", rec.vis_file);
    MSDET_CHECK(fs::exists(ip), mpath, ": missing image file ", rec.ir_file);
    s.visible = read_pnm(vp);
    s.infrared = read_pnm(ip);
    s.gt = rec.gt;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace msdet
