#include "pairdiff/latent.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "pairdiff/optim.hpp"
#include "pairdiff/rng.hpp"
#include "pairdiff/tensor_io.hpp"

namespace pairdiff {

namespace {

using nlohmann::json;

constexpr double kFar = 1e20;  // finite "no site here" marker for the transform

// 1D squared distance transform (lower envelope of parabolas). f holds
// per-position squared offsets (0 at sites, kFar elsewhere).
void dt1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
          std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -kFar;
  z[1] = kFar;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + static_cast<double>(q) * q) -
                (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
               (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + static_cast<double>(q) * q) -
           (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
          (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kFar;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// squared Euclidean distance from every grid cell to the nearest site
std::vector<double> edt2(int h, int w, const std::vector<char>& site) {
  std::vector<double> g(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = site[i] ? 0.0 : kFar;

  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);

  for (int c = 0; c < w; ++c) {  // columns
    for (int r = 0; r < h; ++r) f[r] = g[static_cast<std::size_t>(r) * w + c];
    f.resize(h);
    d.resize(h);
    dt1d(f, d, v, z);
    for (int r = 0; r < h; ++r) g[static_cast<std::size_t>(r) * w + c] = d[r];
    f.resize(n);
    d.resize(n);
  }
  for (int r = 0; r < h; ++r) {  // rows
    for (int c = 0; c < w; ++c) f[c] = g[static_cast<std::size_t>(r) * w + c];
    f.resize(w);
    d.resize(w);
    dt1d(f, d, v, z);
    for (int c = 0; c < w; ++c) g[static_cast<std::size_t>(r) * w + c] = d[c];
    f.resize(n);
    d.resize(n);
  }
  return g;
}

void check_codec_config(const CodecConfig& c) {
  if (c.height < 8 || c.width < 8 || c.height % 4 != 0 || c.width % 4 != 0)
    throw std::runtime_error("codec: grid must be at least 8x8 and divisible by 4");
  if (c.base_width < 1 || c.latent_channels < 1)
    throw std::runtime_error("codec: widths must be positive");
}

std::vector<std::pair<std::string, Shape>> codec_layout(const CodecConfig& c) {
  const int w1 = c.base_width, w2 = 2 * c.base_width, lc = c.latent_channels;
  return {
      {"enc1.w", {w1, 1, 3, 3}},  {"enc1.b", {w1, 1, 1}},
      {"enc2.w", {w2, w1, 3, 3}}, {"enc2.b", {w2, 1, 1}},
      {"enc3.w", {lc, w2, 3, 3}}, {"enc3.b", {lc, 1, 1}},
      {"dec1.w", {w2, lc, 3, 3}}, {"dec1.b", {w2, 1, 1}},
      {"dec2.w", {w1, w2, 3, 3}}, {"dec2.b", {w1, 1, 1}},
      {"dec3.w", {1, w1, 3, 3}},  {"dec3.b", {1, 1, 1}},
  };
}

Tensor init_codec_param(const std::string& name, const Shape& shape, Rng& rng) {
  if (name.ends_with(".b")) return Tensor::zeros(shape);
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= static_cast<std::size_t>(shape[i]);
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Rng r = rng.split(name);
  std::vector<double> vals(shape_numel(shape));
  for (double& v : vals) v = std_dev * r.next_gauss();
  return Tensor::from_data(shape, vals);
}

Tensor conv_block(const ShapeCodec& m, const std::string& name, const Tensor& in) {
  Tensor h = conv2d(in, m.param(name + ".w"), 1);
  return add(h, m.param(name + ".b"));
}

std::array<double, 2> grid_center(int h, int w) {
  return {(h - 1) / 2.0, (w - 1) / 2.0};
}

}  // namespace

SdfGrid sdf_from_mask(const MaskGrid& m) {
  if (m.foreground() == 0.0) throw std::runtime_error("sdf_from_mask: empty mask");
  // pad with a one-cell background ring so the outside exists even for
  // full-grid masks
  const int ph = m.height + 2, pw = m.width + 2;
  std::vector<char> fg(static_cast<std::size_t>(ph) * pw, 0);
  std::vector<char> bg(static_cast<std::size_t>(ph) * pw, 1);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const std::size_t i = static_cast<std::size_t>(r + 1) * pw + (c + 1);
      if (m.at(r, c) == 1.0) {
        fg[i] = 1;
        bg[i] = 0;
      }
    }
  const std::vector<double> d2_fg = edt2(ph, pw, fg);
  const std::vector<double> d2_bg = edt2(ph, pw, bg);

  std::vector<double> out(static_cast<std::size_t>(m.height) * m.width);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const std::size_t pi = static_cast<std::size_t>(r + 1) * pw + (c + 1);
      const std::size_t oi = static_cast<std::size_t>(r) * m.width + c;
      out[oi] = m.at(r, c) == 1.0 ? -std::sqrt(d2_bg[pi]) : std::sqrt(d2_fg[pi]);
    }
  SdfGrid s;
  s.height = m.height;
  s.width = m.width;
  s.values = Tensor::from_data({1, m.height, m.width}, std::move(out));
  return s;
}

MaskGrid mask_from_sdf(const SdfGrid& sdf) {
  std::vector<double> v(sdf.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = sdf.values.data()[i];
    if (!std::isfinite(x)) throw std::runtime_error("mask_from_sdf: non-finite field");
    v[i] = x <= 0.0 ? 1.0 : 0.0;
  }
  return make_mask_grid(sdf.height, sdf.width, std::move(v));
}

Tensor sdf_field(const SdfGrid& sdf, double trunc) {
  if (trunc <= 0.0) throw std::runtime_error("sdf_field: trunc must be positive");
  std::vector<double> v(sdf.values.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = std::clamp(sdf.values.data()[i] / trunc, -1.0, 1.0);
  return Tensor::from_data(sdf.values.shape(), std::move(v));
}

const Tensor& ShapeCodec::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw std::runtime_error("codec: no parameter named '" + name + "'");
  return it->second;
}

Tensor& ShapeCodec::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::runtime_error("codec: no parameter named '" + name + "'");
  return it->second;
}

std::vector<Tensor> ShapeCodec::parameter_list() {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (auto& kv : params) out.push_back(kv.second);
  return out;
}

std::size_t ShapeCodec::parameter_count() const {
  std::size_t n = 0;
  for (const auto& kv : params) n += kv.second.size();
  return n;
}

ShapeCodec make_codec(const CodecConfig& cfg) {
  check_codec_config(cfg);
  ShapeCodec m;
  m.cfg = cfg;
  Rng rng = Rng(cfg.seed).split("codec-init");
  for (const auto& [name, shape] : codec_layout(cfg)) {
    Tensor p = init_codec_param(name, shape, rng).set_requires_grad(true);
    m.params.insert({name, p});
  }
  return m;
}

Tensor encode(const ShapeCodec& codec, const Tensor& field) {
  if (field.shape() != Shape{1, codec.cfg.height, codec.cfg.width})
    throw std::runtime_error("encode: field shaped " + shape_str(field.shape()) +
                             ", codec expects [1," + std::to_string(codec.cfg.height) + "," +
                             std::to_string(codec.cfg.width) + "]");
  Tensor h = avg_pool2d(silu(conv_block(codec, "enc1", field)), 2);
  h = avg_pool2d(silu(conv_block(codec, "enc2", h)), 2);
  return conv_block(codec, "enc3", h);
}

Tensor decode(const ShapeCodec& codec, const Tensor& latent) {
  if (latent.shape() != codec.latent_shape())
    throw std::runtime_error("decode: latent shaped " + shape_str(latent.shape()) +
                             ", codec expects " + shape_str(codec.latent_shape()));
  Tensor h = upsample_nearest(silu(conv_block(codec, "dec1", latent)), 2);
  h = upsample_nearest(silu(conv_block(codec, "dec2", h)), 2);
  return conv_block(codec, "dec3", h);
}

std::pair<Tensor, Tensor> LatentPair::halves() const {
  if (l.ndim() != 3 || split_channels < 1 || split_channels >= l.shape()[0])
    throw std::runtime_error("LatentPair: split at channel " + std::to_string(split_channels) +
                             " does not partition a latent shaped " + shape_str(l.shape()));
  return {slice_channels(l, 0, split_channels), slice_channels(l, split_channels, l.shape()[0])};
}

LatentPair join_latent(const Tensor& x_half, const Tensor& y_half) {
  LatentPair p;
  p.l = concat_channels(x_half, y_half);
  p.split_channels = x_half.shape()[0];
  return p;
}

TrainResult train_codec(ShapeCodec& codec, const std::vector<Tensor>& fields,
                        const TrainConfig& cfg) {
  if (fields.empty()) throw std::runtime_error("train_codec: empty dataset");
  for (const Tensor& f : fields)
    if (f.shape() != Shape{1, codec.cfg.height, codec.cfg.width})
      throw std::runtime_error("train_codec: field shaped " + shape_str(f.shape()) +
                               " does not match the codec grid");

  Rng rng(cfg.seed);
  Adam opt(cfg.lr, cfg.beta1, cfg.beta2);
  std::vector<Tensor> plist = codec.parameter_list();
  const double inv_numel = 1.0 / static_cast<double>(codec.cfg.height * codec.cfg.width);

  TrainResult res;
  res.loss_curve.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    for (Tensor& p : plist) p.zero_grad();
    double step_loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const Tensor& f = fields[rng.next_u64() % fields.size()];
      Tensor r = sub(decode(codec, encode(codec, f)), f);
      Tensor total = cfg.loss == LossKind::L1 ? sum(abs(r)) : sum(square(r));
      Tensor item_loss = scale(total, inv_numel);
      step_loss += item_loss.item();
      backward(scale(item_loss, 1.0 / cfg.batch));
    }
    const double mean_loss = step_loss / cfg.batch;
    if (!std::isfinite(mean_loss))
      throw std::runtime_error("train_codec: non-finite loss at step " + std::to_string(step) +
                               " (lr=" + std::to_string(cfg.lr) + ")");
    res.loss_curve.push_back(mean_loss);
    opt.step(plist);
  }
  return res;
}

void save_codec(const std::string& dir, const ShapeCodec& codec) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json man;
  man["format"] = "pairdiff-codec-v1";
  man["height"] = codec.cfg.height;
  man["width"] = codec.cfg.width;
  man["base_width"] = codec.cfg.base_width;
  man["latent_channels"] = codec.cfg.latent_channels;
  json plist = json::array();
  for (const auto& [name, p] : codec.params)
    plist.push_back({{"name", name}, {"shape", p.shape()}});
  man["params"] = plist;

  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("save_codec: cannot write manifest in " + dir);
  mf << man.dump(2) << "\n";

  std::ofstream pf(fs::path(dir) / "params.pdt", std::ios::binary);
  if (!pf) throw std::runtime_error("save_codec: cannot write params.pdt in " + dir);
  for (const auto& [name, p] : codec.params) write_tensor(pf, p);
}

ShapeCodec load_codec(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("load_codec: no manifest.json in " + dir);
  json man;
  try {
    mf >> man;
  } catch (const json::exception& e) {
    throw std::runtime_error("load_codec: bad manifest in " + dir + ": " + e.what());
  }
  if (man.value("format", "") != "pairdiff-codec-v1")
    throw std::runtime_error("load_codec: unrecognized checkpoint format in " + dir);

  ShapeCodec m;
  m.cfg.height = man.at("height").get<int>();
  m.cfg.width = man.at("width").get<int>();
  m.cfg.base_width = man.at("base_width").get<int>();
  m.cfg.latent_channels = man.at("latent_channels").get<int>();
  check_codec_config(m.cfg);

  auto expected = codec_layout(m.cfg);
  const json& plist = man.at("params");
  if (plist.size() != expected.size())
    throw std::runtime_error("load_codec: manifest lists " + std::to_string(plist.size()) +
                             " params, layout needs " + std::to_string(expected.size()));

  std::ifstream pf(fs::path(dir) / "params.pdt", std::ios::binary);
  if (!pf) throw std::runtime_error("load_codec: no params.pdt in " + dir);
  for (const json& entry : plist) {
    std::string name = entry.at("name").get<std::string>();
    Tensor p = read_tensor(pf, "param '" + name + "'");
    auto it = std::find_if(expected.begin(), expected.end(),
                           [&](const auto& kv) { return kv.first == name; });
    if (it == expected.end())
      throw std::runtime_error("load_codec: unexpected parameter '" + name + "'");
    if (p.shape() != it->second)
      throw std::runtime_error("load_codec: parameter '" + name + "' shaped " +
                               shape_str(p.shape()) + ", expected " + shape_str(it->second));
    m.params.insert({name, p.set_requires_grad(true)});
  }
  if (m.params.size() != expected.size())
    throw std::runtime_error("load_codec: duplicate parameter names in manifest");
  return m;
}

std::array<double, 2> to_canonical(const std::array<double, 2>& p,
                                   const CanonicalTransform& xf, int height, int width) {
  const auto c = grid_center(height, width);
  return {c[0] + (p[0] - c[0] - xf.translation[0]) / xf.scale,
          c[1] + (p[1] - c[1] - xf.translation[1]) / xf.scale};
}

std::array<double, 2> from_canonical(const std::array<double, 2>& q,
                                     const CanonicalTransform& xf, int height, int width) {
  const auto c = grid_center(height, width);
  return {c[0] + xf.translation[0] + (q[0] - c[0]) * xf.scale,
          c[1] + xf.translation[1] + (q[1] - c[1]) * xf.scale};
}

std::pair<MaskGrid, CanonicalTransform> canonicalize(const MaskGrid& m) {
  const double n_fg = m.foreground();
  if (n_fg == 0.0) throw std::runtime_error("canonicalize: empty mask");

  double cr = 0.0, cc = 0.0;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c) == 1.0) {
        cr += r;
        cc += c;
      }
  cr /= n_fg;
  cc /= n_fg;

  double radius = 0.0;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c) == 1.0) radius = std::max(radius, std::hypot(r - cr, c - cc));
  radius = std::max(radius, 0.5);  // a single cell still occupies its cell

  const auto center = grid_center(m.height, m.width);
  const double canonical_radius = 0.4 * ((std::min(m.height, m.width) - 1) / 2.0);
  CanonicalTransform xf;
  xf.translation = {cr - center[0], cc - center[1]};
  xf.scale = radius / canonical_radius;

  std::vector<double> v(static_cast<std::size_t>(m.height) * m.width, 0.0);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const auto p =
          from_canonical({static_cast<double>(r), static_cast<double>(c)}, xf, m.height, m.width);
      const int sr = static_cast<int>(std::lround(p[0]));
      const int sc = static_cast<int>(std::lround(p[1]));
      if (sr >= 0 && sr < m.height && sc >= 0 && sc < m.width && m.at(sr, sc) == 1.0)
        v[static_cast<std::size_t>(r) * m.width + c] = 1.0;
    }
  return {make_mask_grid(m.height, m.width, std::move(v)), xf};
}

MaskGrid uncanonicalize(const MaskGrid& canon, const CanonicalTransform& xf) {
  if (xf.scale <= 0.0) throw std::runtime_error("uncanonicalize: scale must be positive");
  std::vector<double> v(static_cast<std::size_t>(canon.height) * canon.width, 0.0);
  for (int r = 0; r < canon.height; ++r)
    for (int c = 0; c < canon.width; ++c) {
      const auto q = to_canonical({static_cast<double>(r), static_cast<double>(c)}, xf,
                                  canon.height, canon.width);
      const int sr = static_cast<int>(std::lround(q[0]));
      const int sc = static_cast<int>(std::lround(q[1]));
      if (sr >= 0 && sr < canon.height && sc >= 0 && sc < canon.width &&
          canon.at(sr, sc) == 1.0)
        v[static_cast<std::size_t>(r) * canon.width + c] = 1.0;
    }
  return make_mask_grid(canon.height, canon.width, std::move(v));
}

LatentLossFn make_latent_loss(const ShapeCodec& codec, const StepPlan& plan,
                              const Observation& obs, LatentLossConfig lcfg) {
  if (plan.kind != PlanKind::ddim)
    throw std::runtime_error("make_latent_loss: rollout needs a ddim plan");
  obs.validate();
  if (obs.x_star.shape() != Shape{1, codec.cfg.height, codec.cfg.width})
    throw std::runtime_error("make_latent_loss: observation shaped " +
                             shape_str(obs.x_star.shape()) + ", codec grid is [1," +
                             std::to_string(codec.cfg.height) + "," +
                             std::to_string(codec.cfg.width) + "]");
  if (lcfg.budget < 1) throw std::runtime_error("make_latent_loss: budget must be >= 1");

  // codec captured by pointer: caller keeps it alive for the sampling run
  const ShapeCodec* cp = &codec;
  std::vector<int> ts = plan.ts;
  Observation ob = obs;
  return [cp, ts, ob, lcfg](const NoisePredictor& model, const Tensor& x_leaf,
                            const Tensor& y_leaf, int t, EvalCount& evals) -> Tensor {
    auto it = std::find(ts.begin(), ts.end(), t);
    if (it == ts.end())
      throw std::runtime_error("latent loss: t=" + std::to_string(t) +
                               " is not a plan timestep");
    const int idx = static_cast<int>(it - ts.begin());
    const int remaining = static_cast<int>(ts.size()) - 1 - idx;
    if (remaining > lcfg.budget)
      throw std::runtime_error("latent loss: " + std::to_string(remaining) +
                               " transitions left exceeds the differentiation budget of " +
                               std::to_string(lcfg.budget));

    const int detached_prefix = lcfg.bptt > 0 ? std::max(0, remaining - lcfg.bptt) : 0;
    Tensor x = x_leaf, y = y_leaf;
    for (int i = 0; i < remaining; ++i) {
      const int t_hi = ts[static_cast<std::size_t>(idx + i)];
      const int t_lo = ts[static_cast<std::size_t>(idx + i) + 1];
      auto [ex, ey] = model.predict_eps(x, y, t_hi);
      ++evals.forward;
      if (i < detached_prefix) {
        ex = ex.detach();
        ey = ey.detach();
      }
      std::tie(x, y) = apply_ddim(x, y, ex, ey, t_hi, t_lo, model.schedule());
    }
    Tensor field = decode(*cp, concat_channels(x, y));
    return sum(mul(square(sub(field, ob.x_star)), ob.omega));
  };
}

}  // namespace pairdiff
