#include "pairdiff/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "pairdiff/tensor_io.hpp"

namespace pairdiff {

namespace {

int count_components(int h, int w, const std::vector<double>& v) {
  std::vector<char> seen(v.size(), 0);
  std::vector<int> stack;
  int count = 0;
  for (int start = 0; start < h * w; ++start) {
    if (v[static_cast<std::size_t>(start)] == 0.0 || seen[static_cast<std::size_t>(start)])
      continue;
    ++count;
    stack.push_back(start);
    seen[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      const int r = cur / w, c = cur % w;
      const int nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const int idx = n[0] * w + n[1];
        if (v[static_cast<std::size_t>(idx)] != 0.0 && !seen[static_cast<std::size_t>(idx)]) {
          seen[static_cast<std::size_t>(idx)] = 1;
          stack.push_back(idx);
        }
      }
    }
  }
  return count;
}

void check_image(const Tensor& x, const char* who) {
  if (x.ndim() != 3 || x.dim(0) != 1)
    throw std::runtime_error(std::string(who) + ": expected a [1,H,W] image");
}

struct BBox {
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // half-open
  int area() const { return (r1 - r0) * (c1 - c0); }
};

// bounding box of cells with value > 0; whole grid when there are none
BBox foreground_bbox(int h, int w, const std::vector<double>& v) {
  BBox b{h, w, 0, 0};
  bool any = false;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (v[static_cast<std::size_t>(r) * w + c] > 0.0) {
        any = true;
        b.r0 = std::min(b.r0, r);
        b.c0 = std::min(b.c0, c);
        b.r1 = std::max(b.r1, r + 1);
        b.c1 = std::max(b.c1, c + 1);
      }
  if (!any) return {0, 0, h, w};
  return b;
}

// Deletes exactly floor(frac * bbox area) cells inside the bbox, grown as
// small random rectangles so the holes look like missing regions rather than
// salt-and-pepper noise.
std::vector<double> broken_omega(int h, int w, const std::vector<double>& src, double frac,
                                 std::uint64_t seed) {
  const BBox b = foreground_bbox(h, w, src);
  const int target = static_cast<int>(std::floor(frac * b.area()));
  std::vector<double> omega(static_cast<std::size_t>(h) * w, 1.0);
  Rng rng(seed);
  rng = rng.split("broken");
  int removed = 0;
  while (removed < target) {
    const int rr = b.r0 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(b.r1 - b.r0));
    const int cc = b.c0 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(b.c1 - b.c0));
    const int hr = static_cast<int>(rng.next_u64() % 3);
    const int hc = static_cast<int>(rng.next_u64() % 3);
    for (int r = std::max(b.r0, rr - hr); r < std::min(b.r1, rr + hr + 1) && removed < target; ++r)
      for (int c = std::max(b.c0, cc - hc); c < std::min(b.c1, cc + hc + 1) && removed < target; ++c) {
        auto& cell = omega[static_cast<std::size_t>(r) * w + c];
        if (cell != 0.0) {
          cell = 0.0;
          ++removed;
        }
      }
  }
  return omega;
}

// observation mask for every kind except downsample (which changes resolution)
std::vector<double> omega_values(const DegradationSpec& spec, int h, int w,
                                 const std::vector<double>& src) {
  std::vector<double> omega(static_cast<std::size_t>(h) * w, 0.0);
  auto keep_row = [&](int r) {
    for (int c = 0; c < w; ++c) omega[static_cast<std::size_t>(r) * w + c] = 1.0;
  };
  switch (spec.kind) {
    case DegradationKind::keep_rows:
    case DegradationKind::multiplane:
      for (int r : spaced_rows(h, spec.k)) keep_row(r);
      return omega;
    case DegradationKind::missing_middle_rows: {
      const int start = (h - spec.k) / 2;
      omega.assign(omega.size(), 1.0);
      for (int r = start; r < start + spec.k; ++r)
        for (int c = 0; c < w; ++c) omega[static_cast<std::size_t>(r) * w + c] = 0.0;
      return omega;
    }
    case DegradationKind::oneplane:
      keep_row((h - 1) / 2);
      return omega;
    case DegradationKind::triplane: {
      keep_row((h - 1) / 2);
      for (int r = 0; r < h; ++r) omega[static_cast<std::size_t>(r) * w + (w - 1) / 2] = 1.0;
      for (int r = 0; r < h; ++r) {
        const int c = static_cast<int>((static_cast<long long>(r) * w) / h);
        omega[static_cast<std::size_t>(r) * w + c] = 1.0;
      }
      return omega;
    }
    case DegradationKind::broken:
      return broken_omega(h, w, src, spec.frac, spec.seed);
    case DegradationKind::random_combo: {
      Rng rng(spec.seed);
      rng = rng.split("combo");
      static const DegradationKind kinds[4] = {
          DegradationKind::oneplane, DegradationKind::triplane,
          DegradationKind::multiplane, DegradationKind::broken};
      DegradationSpec sub = spec;
      sub.kind = kinds[rng.next_u64() % 4];
      sub.seed = rng.next_u64();
      sub.validate(h, w);
      return omega_values(sub, h, w, src);
    }
    case DegradationKind::downsample:
      throw std::runtime_error("omega_values: downsample handled separately");
  }
  throw std::runtime_error("omega_values: unknown kind");
}

}  // namespace

double MaskGrid::foreground() const {
  double n = 0.0;
  for (double v : values) n += v;
  return n;
}

double MaskGrid::fraction() const {
  return values.empty() ? 0.0 : foreground() / static_cast<double>(values.size());
}

MaskGrid make_mask_grid(int height, int width, std::vector<double> values) {
  if (height < 1 || width < 1)
    throw std::runtime_error("make_mask_grid: bad resolution " + std::to_string(height) +
                             "x" + std::to_string(width));
  if (values.size() != static_cast<std::size_t>(height) * width)
    throw std::runtime_error("make_mask_grid: " + std::to_string(values.size()) +
                             " values for " + std::to_string(height) + "x" +
                             std::to_string(width));
  for (double v : values)
    if (v != 0.0 && v != 1.0)
      throw std::runtime_error("make_mask_grid: non-binary value " + std::to_string(v));
  MaskGrid m;
  m.height = height;
  m.width = width;
  m.values = std::move(values);
  m.components = count_components(height, width, m.values);
  return m;
}

Tensor mask_to_tensor(const MaskGrid& m) {
  return Tensor::from_data({1, m.height, m.width}, m.values);
}

MaskGrid tensor_to_mask(const Tensor& t, double threshold) {
  check_image(t, "tensor_to_mask");
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) v[i] = t.data()[i] > threshold ? 1.0 : 0.0;
  return make_mask_grid(t.dim(1), t.dim(2), std::move(v));
}

Tensor mask_to_signal(const MaskGrid& m) {
  std::vector<double> v(m.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 2.0 * m.values[i] - 1.0;
  return Tensor::from_data({1, m.height, m.width}, std::move(v));
}

MaskGrid signal_to_mask(const Tensor& t) { return tensor_to_mask(t, 0.0); }

std::vector<ToyPair> gen_toy_pairs(int n, int resolution, std::uint64_t seed) {
  if (n < 1) throw std::runtime_error("gen_toy_pairs: n < 1");
  if (resolution < 8) throw std::runtime_error("gen_toy_pairs: resolution < 8");
  const int h = resolution, w = resolution;
  Rng root = Rng(seed).split("toy-pairs");

  std::vector<ToyPair> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    std::vector<double> mask, intensity;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 100)
        throw std::runtime_error("gen_toy_pairs: could not place a big enough organ");
      const int n_ell = 2 + static_cast<int>(rng.next_u64() % 3);
      struct Ell { double cr, cc, a, b, cs, sn, bright; };
      std::vector<Ell> ells;
      for (int e = 0; e < n_ell; ++e) {
        Ell el;
        el.cr = (0.28 + 0.44 * rng.next_unit()) * h;
        el.cc = (0.28 + 0.44 * rng.next_unit()) * w;
        el.a = (0.08 + 0.14 * rng.next_unit()) * h;
        el.b = (0.08 + 0.14 * rng.next_unit()) * h;
        const double th = rng.next_unit() * 3.14159265358979323846;
        el.cs = std::cos(th);
        el.sn = std::sin(th);
        el.bright = 0.3 + 0.6 * rng.next_unit();
        ells.push_back(el);
      }
      mask.assign(static_cast<std::size_t>(h) * w, 0.0);
      intensity.assign(static_cast<std::size_t>(h) * w, 0.0);
      double fg = 0.0;
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          double best = 0.0;
          for (const Ell& el : ells) {
            const double dr = r - el.cr, dc = c - el.cc;
            const double u = (dc * el.cs + dr * el.sn) / el.a;
            const double v = (-dc * el.sn + dr * el.cs) / el.b;
            if (u * u + v * v <= 1.0) best = std::max(best, el.bright);
          }
          if (best > 0.0) {
            mask[static_cast<std::size_t>(r) * w + c] = 1.0;
            intensity[static_cast<std::size_t>(r) * w + c] = best;
            fg += 1.0;
          }
        }
      if (fg >= 16.0) break;
    }
    std::vector<double> img(intensity.size());
    for (std::size_t j = 0; j < img.size(); ++j) {
      const double v = 2.0 * intensity[j] - 1.0 + 0.05 * rng.next_gauss();
      img[j] = std::clamp(v, -1.0, 1.0);
    }
    ToyPair p{Tensor::from_data({1, h, w}, std::move(img)),
              make_mask_grid(h, w, std::move(mask))};
    out.push_back(std::move(p));
  }
  return out;
}

std::string to_string(DegradationKind k) {
  switch (k) {
    case DegradationKind::downsample: return "downsample";
    case DegradationKind::missing_middle_rows: return "missing_middle_rows";
    case DegradationKind::keep_rows: return "keep_rows";
    case DegradationKind::broken: return "broken";
    case DegradationKind::oneplane: return "oneplane";
    case DegradationKind::triplane: return "triplane";
    case DegradationKind::multiplane: return "multiplane";
    case DegradationKind::random_combo: return "random_combo";
  }
  throw std::runtime_error("to_string: unknown degradation kind");
}

void DegradationSpec::validate(int height, int width) const {
  if (height < 1 || width < 1) throw std::runtime_error("DegradationSpec: empty grid");
  switch (kind) {
    case DegradationKind::downsample:
      if (k < 2 || height % k != 0 || width % k != 0)
        throw std::runtime_error("downsample: factor " + std::to_string(k) +
                                 " does not divide " + std::to_string(height) + "x" +
                                 std::to_string(width));
      return;
    case DegradationKind::missing_middle_rows:
    case DegradationKind::keep_rows:
    case DegradationKind::multiplane:
      if (k < 1 || k > height)
        throw std::runtime_error(to_string(kind) + ": k=" + std::to_string(k) +
                                 " outside 1.." + std::to_string(height));
      return;
    case DegradationKind::broken:
      if (frac < 0.0 || frac > 1.0)
        throw std::runtime_error("broken: frac " + std::to_string(frac) +
                                 " outside [0,1]");
      return;
    case DegradationKind::random_combo:
      if (k < 1 || k > height)
        throw std::runtime_error("random_combo: k=" + std::to_string(k) +
                                 " outside 1.." + std::to_string(height));
      if (frac < 0.0 || frac > 1.0)
        throw std::runtime_error("random_combo: frac outside [0,1]");
      return;
    case DegradationKind::oneplane:
    case DegradationKind::triplane:
      return;
  }
  throw std::runtime_error("DegradationSpec: unknown kind");
}

std::vector<int> spaced_rows(int height, int k) {
  if (k < 1 || k > height)
    throw std::runtime_error("spaced_rows: k=" + std::to_string(k) + " outside 1.." +
                             std::to_string(height));
  std::vector<int> rows;
  rows.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j)
    rows.push_back(static_cast<int>((2LL * j + 1) * height / (2LL * k)));
  return rows;
}

Degraded degrade(const Tensor& x, const DegradationSpec& spec) {
  check_image(x, "degrade");
  const int h = x.dim(1), w = x.dim(2);
  spec.validate(h, w);

  if (spec.kind == DegradationKind::downsample) {
    const int f = spec.k, lh = h / f, lw = w / f;
    std::vector<double> low(static_cast<std::size_t>(lh) * lw, 0.0);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        low[static_cast<std::size_t>(r / f) * lw + c / f] +=
            x.data()[static_cast<std::size_t>(r) * w + c];
    for (double& v : low) v /= static_cast<double>(f) * f;
    Degraded d{Tensor::from_data({1, lh, lw}, std::move(low)),
               make_mask_grid(lh, lw, std::vector<double>(static_cast<std::size_t>(lh) * lw, 1.0))};
    return d;
  }

  std::vector<double> src(x.data().begin(), x.data().end());
  std::vector<double> om = omega_values(spec, h, w, src);
  std::vector<double> deg(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) deg[i] = om[i] != 0.0 ? src[i] : 0.0;
  return {Tensor::from_data({1, h, w}, std::move(deg)), make_mask_grid(h, w, std::move(om))};
}

PromptResult plane_prompts(const MaskGrid& mask, const DegradationSpec& spec) {
  if (mask.foreground() == 0.0) throw std::runtime_error("plane_prompts: empty mask");
  switch (spec.kind) {
    case DegradationKind::oneplane:
    case DegradationKind::triplane:
    case DegradationKind::multiplane:
    case DegradationKind::broken:
    case DegradationKind::random_combo:
      break;
    default:
      throw std::runtime_error("plane_prompts: " + to_string(spec.kind) +
                               " is not a prompt kind");
  }
  spec.validate(mask.height, mask.width);
  std::vector<double> om = omega_values(spec, mask.height, mask.width, mask.values);
  std::vector<double> part(om.size());
  for (std::size_t i = 0; i < om.size(); ++i)
    part[i] = om[i] != 0.0 ? mask.values[i] : 0.0;
  return {make_mask_grid(mask.height, mask.width, std::move(part)),
          make_mask_grid(mask.height, mask.width, std::move(om))};
}

void save_dataset(const std::string& dir, const std::vector<ToyPair>& pairs,
                  int resolution, std::uint64_t seed) {
  if (pairs.empty()) throw std::runtime_error("save_dataset: no pairs");
  std::filesystem::create_directories(dir);
  nlohmann::json index;
  index["format"] = "pairdiff-dataset-v1";
  index["n"] = pairs.size();
  index["resolution"] = resolution;
  index["seed"] = seed;
  nlohmann::json items = nlohmann::json::array();
  char name[64];
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::snprintf(name, sizeof(name), "pair-%05zu", i);
    const std::string xfile = std::string(name) + "-x.pdt";
    const std::string yfile = std::string(name) + "-y.pdt";
    write_tensor_file(dir + "/" + xfile, pairs[i].x);
    write_tensor_file(dir + "/" + yfile, mask_to_tensor(pairs[i].y));
    items.push_back({{"id", name}, {"x", xfile}, {"y", yfile}});
  }
  index["items"] = std::move(items);
  std::ofstream os(dir + "/index.json", std::ios::binary);
  if (!os) throw std::runtime_error("save_dataset: cannot write " + dir + "/index.json");
  os << index.dump(2) << "\n";
}

std::vector<ToyPair> load_dataset(const std::string& dir) {
  std::ifstream is(dir + "/index.json", std::ios::binary);
  if (!is) throw std::runtime_error("load_dataset: cannot open " + dir + "/index.json");
  nlohmann::json index = nlohmann::json::parse(is, nullptr, true);
  if (index.value("format", "") != "pairdiff-dataset-v1")
    throw std::runtime_error("load_dataset: " + dir + " is not a dataset directory");
  std::vector<ToyPair> out;
  for (const auto& item : index.at("items")) {
    Tensor x = read_tensor_file(dir + "/" + item.at("x").get<std::string>());
    Tensor y = read_tensor_file(dir + "/" + item.at("y").get<std::string>());
    out.push_back({std::move(x), tensor_to_mask(y, 0.5)});
  }
  return out;
}

}  // namespace pairdiff
