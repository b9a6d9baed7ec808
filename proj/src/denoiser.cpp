#include "pairdiff/denoiser.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "pairdiff/rng.hpp"
#include "pairdiff/optim.hpp"
#include "pairdiff/tensor_io.hpp"

namespace pairdiff {

namespace {

using nlohmann::json;

// Ordered parameter layout for a given geometry. Everything else (init,
// checkpoint validation) is derived from this single table.
std::vector<std::pair<std::string, Shape>> param_layout(const DenoiserConfig& cfg) {
  const int cin = cfg.cx + cfg.cy;
  const int w1 = cfg.base_width, w2 = 2 * cfg.base_width, w3 = 4 * cfg.base_width;
  std::vector<std::pair<std::string, Shape>> out;
  auto block = [&](const std::string& name, int in, int ch) {
    out.push_back({name + ".conv1.w", {ch, in, 3, 3}});
    out.push_back({name + ".conv1.b", {ch, 1, 1}});
    out.push_back({name + ".temb.w", {ch, cfg.emb_dim}});
    out.push_back({name + ".temb.b", {ch, 1}});
    out.push_back({name + ".conv2.w", {ch, ch, 3, 3}});
    out.push_back({name + ".conv2.b", {ch, 1, 1}});
  };
  block("enc1", cin, w1);
  block("enc2", w1, w2);
  block("mid", w2, w3);
  block("dec2", w3 + w2, w2);
  block("dec1", w2 + w1, w1);
  out.push_back({"out.w", {cin, w1, 1, 1}});
  out.push_back({"out.b", {cin, 1, 1}});
  return out;
}

void check_config(const DenoiserConfig& cfg) {
  if (cfg.cx < 1 || cfg.cy < 1) throw std::runtime_error("denoiser: channel split must be >= 1 each");
  if (cfg.height % 4 != 0 || cfg.width % 4 != 0)
    throw std::runtime_error("denoiser: grid " + std::to_string(cfg.height) + "x" +
                             std::to_string(cfg.width) + " not divisible by 4");
  if (cfg.base_width < 1) throw std::runtime_error("denoiser: base_width must be >= 1");
  if (cfg.emb_dim < 2 || cfg.emb_dim % 2 != 0)
    throw std::runtime_error("denoiser: emb_dim must be even and >= 2");
}

// Two 3x3 convs with SiLU; the timestep bias lands after the first conv.
Tensor res_block(const PairDenoiser& m, const std::string& name, const Tensor& in,
                 const Tensor& emb) {
  Tensor h = conv2d(in, m.param(name + ".conv1.w"), 1);
  h = add(h, m.param(name + ".conv1.b"));
  Tensor tb = add(matmul(m.param(name + ".temb.w"), emb), m.param(name + ".temb.b"));
  int ch = m.param(name + ".conv1.b").shape()[0];
  h = add(h, reshape(tb, {ch, 1, 1}));
  h = silu(h);
  h = conv2d(h, m.param(name + ".conv2.w"), 1);
  h = add(h, m.param(name + ".conv2.b"));
  return silu(h);
}

Tensor forward_stacked(const PairDenoiser& m, const Tensor& stacked, int t) {
  Tensor emb = timestep_embedding(t, m.cfg.emb_dim);
  Tensor e1 = res_block(m, "enc1", stacked, emb);
  Tensor e2 = res_block(m, "enc2", avg_pool2d(e1, 2), emb);
  Tensor mid = res_block(m, "mid", avg_pool2d(e2, 2), emb);
  Tensor d2 = res_block(m, "dec2", concat_channels(upsample_nearest(mid, 2), e2), emb);
  Tensor d1 = res_block(m, "dec1", concat_channels(upsample_nearest(d2, 2), e1), emb);
  Tensor out = conv2d(d1, m.param("out.w"), 0);
  return add(out, m.param("out.b"));
}

Tensor init_param(const std::string& name, const Shape& shape, Rng& model_rng) {
  const bool zero = name.starts_with("out.") || name.ends_with(".b");
  if (zero) return Tensor::zeros(shape);
  // He-style fan-in scaling; fan-in is everything except the leading dim.
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= static_cast<std::size_t>(shape[i]);
  double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Rng r = model_rng.split(name);
  std::vector<double> vals(shape_numel(shape));
  for (double& v : vals) v = std_dev * r.next_gauss();
  return Tensor::from_data(shape, vals);
}

}  // namespace

const Tensor& PairDenoiser::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw std::runtime_error("denoiser: no parameter named '" + name + "'");
  return it->second;
}

Tensor& PairDenoiser::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::runtime_error("denoiser: no parameter named '" + name + "'");
  return it->second;
}

std::vector<Tensor> PairDenoiser::parameter_list() {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (auto& kv : params) out.push_back(kv.second);
  return out;
}

std::size_t PairDenoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& kv : params) n += kv.second.size();
  return n;
}

PairDenoiser make_denoiser(const DenoiserConfig& cfg, const NoiseSchedule& sched) {
  check_config(cfg);
  PairDenoiser m;
  m.cfg = cfg;
  m.sched = sched;
  Rng rng(cfg.seed);
  for (const auto& [name, shape] : param_layout(cfg)) {
    Tensor p = init_param(name, shape, rng).set_requires_grad(true);
    m.params.insert({name, p});
  }
  return m;
}

Tensor timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  std::vector<double> e(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    double denom = half > 1 ? static_cast<double>(half - 1) : 1.0;
    double freq = std::exp(-std::log(10000.0) * i / denom);
    e[static_cast<std::size_t>(i)] = std::sin(t * freq);
    e[static_cast<std::size_t>(half + i)] = std::cos(t * freq);
  }
  return Tensor::from_data({dim, 1}, e);
}

std::pair<Tensor, Tensor> predict_eps(const PairDenoiser& model, const Tensor& x_t,
                                      const Tensor& y_t, int t) {
  const DenoiserConfig& c = model.cfg;
  Shape want_x = {c.cx, c.height, c.width};
  Shape want_y = {c.cy, c.height, c.width};
  if (x_t.shape() != want_x || y_t.shape() != want_y)
    throw std::runtime_error("predict_eps: got x " + shape_str(x_t.shape()) + ", y " +
                             shape_str(y_t.shape()) + "; model expects " + shape_str(want_x) +
                             " and " + shape_str(want_y));
  if (t < 1 || t > model.sched.T)
    throw std::runtime_error("predict_eps: t=" + std::to_string(t) + " outside [1," +
                             std::to_string(model.sched.T) + "]");
  Tensor out = forward_stacked(model, concat_channels(x_t, y_t), t);
  return {slice_channels(out, 0, c.cx), slice_channels(out, c.cx, c.cx + c.cy)};
}

std::string to_string(LossKind k) { return k == LossKind::L1 ? "l1" : "l2"; }

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "l1" || s == "L1") return LossKind::L1;
  if (s == "l2" || s == "L2") return LossKind::L2;
  throw std::runtime_error("unknown loss kind '" + s + "' (expected l1|l2)");
}

TrainDraw draw_train_sample(Rng& rng, std::size_t dataset_size, const NoiseSchedule& sched,
                            int cx, int cy, int height, int width) {
  TrainDraw d{0, 0, Tensor::zeros({cx, height, width}), Tensor::zeros({cy, height, width})};
  d.index = static_cast<std::size_t>(rng.next_u64() % dataset_size);
  d.t = 1 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(sched.T));
  rng.fill_gauss(d.eps_x.mutable_data());
  rng.fill_gauss(d.eps_y.mutable_data());
  return d;
}

TrainResult train_pair(PairDenoiser& model, const PairDataset& dataset,
                       const NoiseSchedule& sched, const TrainConfig& cfg) {
  if (dataset.empty()) throw std::runtime_error("train_pair: empty dataset");
  if (cfg.lr < 0.0) throw std::runtime_error("train_pair: negative learning rate");
  if (cfg.steps < 1) throw std::runtime_error("train_pair: steps must be >= 1");
  if (cfg.batch < 1) throw std::runtime_error("train_pair: batch must be >= 1");
  const DenoiserConfig& c = model.cfg;
  Shape want_x = {c.cx, c.height, c.width};
  Shape want_y = {c.cy, c.height, c.width};
  for (const auto& [x0, y0] : dataset)
    if (x0.shape() != want_x || y0.shape() != want_y)
      throw std::runtime_error("train_pair: dataset pair shaped " + shape_str(x0.shape()) +
                               "/" + shape_str(y0.shape()) + " does not match model grid");
  if (sched.T != model.sched.T || sched.kind != model.sched.kind ||
      sched.betas != model.sched.betas)
    throw std::runtime_error("train_pair: schedule does not match the one the model was built for");

  Rng rng(cfg.seed);
  Adam opt(cfg.lr, cfg.beta1, cfg.beta2);
  std::vector<Tensor> plist = model.parameter_list();
  const double inv_numel =
      1.0 / static_cast<double>((c.cx + c.cy) * c.height * c.width);

  TrainResult res;
  res.loss_curve.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    for (Tensor& p : plist) p.zero_grad();
    double step_loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      TrainDraw d = draw_train_sample(rng, dataset.size(), sched, c.cx, c.cy, c.height, c.width);
      const auto& [x0, y0] = dataset[d.index];
      Tensor x_t = q_sample(x0, d.t, d.eps_x, sched);
      Tensor y_t = q_sample(y0, d.t, d.eps_y, sched);
      auto [px, py] = predict_eps(model, x_t, y_t, d.t);
      Tensor rx = sub(px, d.eps_x);
      Tensor ry = sub(py, d.eps_y);
      Tensor total = cfg.loss == LossKind::L1 ? add(sum(abs(rx)), sum(abs(ry)))
                                              : add(sum(square(rx)), sum(square(ry)));
      Tensor item_loss = scale(total, inv_numel);  // mean over both channels
      step_loss += item_loss.item();
      backward(scale(item_loss, 1.0 / cfg.batch));  // grads sum to batch mean
    }
    double mean_loss = step_loss / cfg.batch;
    if (!std::isfinite(mean_loss))
      throw std::runtime_error("train_pair: non-finite loss at step " + std::to_string(step) +
                               " (lr=" + std::to_string(cfg.lr) + ")");
    res.loss_curve.push_back(mean_loss);
    opt.step(plist);
  }
  return res;
}

void save_denoiser(const std::string& dir, const PairDenoiser& model) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json man;
  man["format"] = "pairdiff-denoiser-v1";
  man["cx"] = model.cfg.cx;
  man["cy"] = model.cfg.cy;
  man["height"] = model.cfg.height;
  man["width"] = model.cfg.width;
  man["base_width"] = model.cfg.base_width;
  man["emb_dim"] = model.cfg.emb_dim;
  man["schedule"] = {{"kind", to_string(model.sched.kind)},
                     {"T", model.sched.T},
                     {"beta_min", model.sched.beta_min},
                     {"beta_max", model.sched.beta_max}};
  json plist = json::array();
  for (const auto& [name, p] : model.params)
    plist.push_back({{"name", name}, {"shape", p.shape()}});
  man["params"] = plist;

  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("save_denoiser: cannot write manifest in " + dir);
  mf << man.dump(2) << "\n";

  std::ofstream pf(fs::path(dir) / "params.pdt", std::ios::binary);
  if (!pf) throw std::runtime_error("save_denoiser: cannot write params.pdt in " + dir);
  for (const auto& [name, p] : model.params) write_tensor(pf, p);
}

PairDenoiser load_denoiser(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("load_denoiser: no manifest.json in " + dir);
  json man;
  try {
    mf >> man;
  } catch (const json::exception& e) {
    throw std::runtime_error("load_denoiser: bad manifest in " + dir + ": " + e.what());
  }
  if (man.value("format", "") != "pairdiff-denoiser-v1")
    throw std::runtime_error("load_denoiser: unrecognized checkpoint format in " + dir);

  PairDenoiser m;
  m.cfg.cx = man.at("cx").get<int>();
  m.cfg.cy = man.at("cy").get<int>();
  m.cfg.height = man.at("height").get<int>();
  m.cfg.width = man.at("width").get<int>();
  m.cfg.base_width = man.at("base_width").get<int>();
  m.cfg.emb_dim = man.at("emb_dim").get<int>();
  const json& sj = man.at("schedule");
  m.sched = make_schedule(schedule_kind_from_string(sj.at("kind").get<std::string>()),
                          sj.at("T").get<int>(), sj.at("beta_min").get<double>(),
                          sj.at("beta_max").get<double>());
  check_config(m.cfg);

  auto expected = param_layout(m.cfg);
  const json& plist = man.at("params");
  if (plist.size() != expected.size())
    throw std::runtime_error("load_denoiser: manifest lists " + std::to_string(plist.size()) +
                             " params, layout needs " + std::to_string(expected.size()));

  std::ifstream pf(fs::path(dir) / "params.pdt", std::ios::binary);
  if (!pf) throw std::runtime_error("load_denoiser: no params.pdt in " + dir);
  for (const json& entry : plist) {
    std::string name = entry.at("name").get<std::string>();
    Tensor p = read_tensor(pf, "param '" + name + "'");
    auto it = std::find_if(expected.begin(), expected.end(),
                           [&](const auto& kv) { return kv.first == name; });
    if (it == expected.end())
      throw std::runtime_error("load_denoiser: unexpected parameter '" + name + "'");
    if (p.shape() != it->second)
      throw std::runtime_error("load_denoiser: parameter '" + name + "' shaped " +
                               shape_str(p.shape()) + ", expected " + shape_str(it->second));
    m.params.insert({name, p.set_requires_grad(true)});
  }
  if (m.params.size() != expected.size())
    throw std::runtime_error("load_denoiser: duplicate parameter names in manifest");
  return m;
}

}  // namespace pairdiff
