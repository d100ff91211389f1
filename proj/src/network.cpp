#include "spade/network.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "spade/binary_io.hpp"
#include "spade/layers.hpp"

namespace spade {

void ModelConfig::validate() const {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("model kernel must be odd and >= 1");
  for (int c : {enc1_channels, enc2_channels, local_channels, global_hidden, global_dim, local_hidden, local_dim,
                local_grid}) {
    if (c < 1) throw ConfigError("model widths must be >= 1");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"kernel", c.kernel},
       {"head_standardize", c.head_standardize},
       {"enc1_channels", c.enc1_channels},
       {"enc2_channels", c.enc2_channels},
       {"local_channels", c.local_channels},
       {"global_hidden", c.global_hidden},
       {"global_dim", c.global_dim},
       {"local_hidden", c.local_hidden},
       {"local_dim", c.local_dim},
       {"local_grid", c.local_grid},
       {"layer_norm", c.layer_norm}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.kernel = j.value("kernel", d.kernel);
  c.enc1_channels = j.value("enc1_channels", d.enc1_channels);
  c.enc2_channels = j.value("enc2_channels", d.enc2_channels);
  c.local_channels = j.value("local_channels", d.local_channels);
  c.global_hidden = j.value("global_hidden", d.global_hidden);
  c.global_dim = j.value("global_dim", d.global_dim);
  c.local_hidden = j.value("local_hidden", d.local_hidden);
  c.local_dim = j.value("local_dim", d.local_dim);
  c.local_grid = j.value("local_grid", d.local_grid);
  c.layer_norm = j.value("layer_norm", d.layer_norm);
  c.head_standardize = j.value("head_standardize", d.head_standardize);
}

Network::Network(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::int64_t k = cfg_.kernel;
  const std::int64_t e1 = cfg_.enc1_channels, e2 = cfg_.enc2_channels, lc = cfg_.local_channels;
  auto add = [&](std::string name, std::vector<std::int64_t> shape, bool trainable = true) {
    std::size_t size = 1;
    for (auto s : shape) size *= static_cast<std::size_t>(s);
    blocks_.push_back({std::move(name), std::move(shape), num_params_, size, trainable});
    num_params_ += size;
  };
  add("enc1.weight", {e1, 1, k, k, k});
  add("enc1.bias", {e1});
  add("enc2.weight", {e2, e1, k, k, k});
  add("enc2.bias", {e2});
  if (cfg_.layer_norm) {
    add("enc1.gain", {e1});
    add("enc1.shift", {e1});
    add("enc2.gain", {e2});
    add("enc2.shift", {e2});
  }
  add("glob1.weight", {cfg_.global_hidden, e2});
  add("glob1.bias", {cfg_.global_hidden});
  add("glob2.weight", {cfg_.global_dim, cfg_.global_hidden});
  add("glob2.bias", {cfg_.global_dim});
  add("dec1.weight", {lc, e2 + e1, 1, 1, 1});
  add("dec1.bias", {lc});
  if (cfg_.layer_norm) {
    add("dec1.gain", {lc});
    add("dec1.shift", {lc});
  }
  add("dec2.weight", {lc, lc, 1, 1, 1});
  add("dec2.bias", {lc});
  add("recon.weight", {1, lc, 1, 1, 1});
  add("recon.bias", {1});
  add("loc1.weight", {cfg_.local_hidden, lc, 1, 1, 1});
  add("loc1.bias", {cfg_.local_hidden});
  add("loc2.weight", {cfg_.local_dim, cfg_.local_hidden, 1, 1, 1});
  add("loc2.bias", {cfg_.local_dim});
  if (cfg_.head_standardize) {
    add("glob.mean", {e2}, false);
    add("glob.var", {e2}, false);
    add("loc.mean", {lc}, false);
    add("loc.var", {lc}, false);
  }
}

const ParamBlock& Network::block(const std::string& name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return b;
  }
  throw ShapeError("unknown parameter block " + name);
}

std::span<const double> Network::view(std::span<const double> params, const std::string& name) const {
  const auto& b = block(name);
  return params.subspan(b.offset, b.size);
}

std::span<double> Network::view(std::span<double> grad, const std::string& name) const {
  const auto& b = block(name);
  return grad.subspan(b.offset, b.size);
}

void Network::check_params(std::span<const double> params) const {
  if (params.size() != num_params_) {
    throw ShapeError("parameter vector has " + std::to_string(params.size()) + " values, expected " +
                     std::to_string(num_params_));
  }
}

std::vector<double> Network::init_params(std::uint64_t seed) const {
  std::vector<double> p(num_params_, 0.0);
  std::mt19937_64 rng(seed);
  for (const auto& b : blocks_) {
    if (b.name.ends_with(".gain") || b.name.ends_with(".var")) std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size, 1.0);
    if (b.shape.size() < 2) continue;  // biases and shifts start at zero
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < b.shape.size(); ++i) fan_in *= static_cast<std::size_t>(b.shape[i]);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < b.size; ++i) p[b.offset + i] = dist(rng);
  }
  return p;
}

std::vector<std::size_t> Network::trainable_indices() const {
  std::vector<std::size_t> out;
  for (const auto& b : blocks_) {
    if (!b.trainable) continue;
    for (std::size_t i = 0; i < b.size; ++i) out.push_back(b.offset + i);
  }
  return out;
}

namespace {

constexpr double kStatEps = 1e-5;

void update_stats(std::span<double> mean, std::span<double> var, const std::vector<std::vector<double>>& rows,
                  double rate) {
  if (rows.empty()) return;
  const double n = static_cast<double>(rows.size());
  for (std::size_t c = 0; c < mean.size(); ++c) {
    double m = 0.0, v = 0.0;
    for (const auto& r : rows) m += r[c];
    m /= n;
    for (const auto& r : rows) v += (r[c] - m) * (r[c] - m);
    v /= n;
    mean[c] = (1.0 - rate) * mean[c] + rate * m;
    var[c] = (1.0 - rate) * var[c] + rate * v;
  }
}

}  // namespace

void Network::update_head_stats(std::span<double> params, const std::vector<std::vector<double>>& global_pooled,
                                const std::vector<Tensor>& local_pooled, double rate) const {
  if (!cfg_.head_standardize) return;
  check_params(params);
  update_stats(view(params, "glob.mean"), view(params, "glob.var"), global_pooled, rate);
  std::vector<std::vector<double>> cells;
  for (const auto& t : local_pooled) {
    for (std::int64_t i = 0; i < t.spatial(); ++i) {
      std::vector<double> row(static_cast<std::size_t>(t.channels()));
      for (std::int64_t c = 0; c < t.channels(); ++c) row[static_cast<std::size_t>(c)] = t.channel(c)[static_cast<std::size_t>(i)];
      cells.push_back(std::move(row));
    }
  }
  update_stats(view(params, "loc.mean"), view(params, "loc.var"), cells, rate);
}

Network::Trunk Network::forward_trunk(std::span<const double> params, const Tensor& patch, bool decode) const {
  check_params(params);
  if (patch.channels() != 1) throw ShapeError("network input must have one channel");
  Trunk t;
  t.x = patch;
  auto norm = [&](Tensor& y, const std::string& name, nn::LayerNormState& st) {
    if (cfg_.layer_norm) y = nn::layer_norm(y, view(params, name + ".gain"), view(params, name + ".shift"), st);
  };
  t.a1 = nn::conv3d(t.x, view(params, "enc1.weight"), view(params, "enc1.bias"), cfg_.enc1_channels, cfg_.kernel);
  norm(t.a1, "enc1", t.n1);
  nn::relu_inplace(t.a1);
  t.p1 = nn::avgpool2(t.a1);
  t.f = nn::conv3d(t.p1, view(params, "enc2.weight"), view(params, "enc2.bias"), cfg_.enc2_channels, cfg_.kernel);
  norm(t.f, "enc2", t.n2);
  nn::relu_inplace(t.f);
  if (decode) {
    t.c = nn::concat_channels(nn::upsample2(t.f), t.a1);
    t.d1 = nn::conv3d(t.c, view(params, "dec1.weight"), view(params, "dec1.bias"), cfg_.local_channels, 1);
    norm(t.d1, "dec1", t.nd);
    nn::relu_inplace(t.d1);
    t.z = nn::conv3d(t.d1, view(params, "dec2.weight"), view(params, "dec2.bias"), cfg_.local_channels, 1);
    t.decoded = true;
  }
  return t;
}

void Network::backward_trunk(std::span<const double> params, const Trunk& t, const Tensor* df, const Tensor* dz,
                             std::span<double> grad) const {
  Tensor df_total(t.f.channels(), t.f.depth(), t.f.height(), t.f.width());
  Tensor da1(t.a1.channels(), t.a1.depth(), t.a1.height(), t.a1.width());
  auto unnorm = [&](Tensor& dy, const std::string& name, const nn::LayerNormState& st) {
    if (cfg_.layer_norm) {
      dy = nn::layer_norm_backward(st, view(params, name + ".gain"), dy, view(grad, name + ".gain"),
                                   view(grad, name + ".shift"));
    }
  };
  if (df != nullptr) df_total = *df;
  if (dz != nullptr) {
    if (!t.decoded) throw ShapeError("backward through an undecoded trunk");
    Tensor dd1 = nn::conv3d_backward(t.d1, view(params, "dec2.weight"), *dz, 1, view(grad, "dec2.weight"),
                                     view(grad, "dec2.bias"));
    nn::relu_backward_inplace(t.d1, dd1);
    unnorm(dd1, "dec1", t.nd);
    const Tensor dc = nn::conv3d_backward(t.c, view(params, "dec1.weight"), dd1, 1, view(grad, "dec1.weight"),
                                          view(grad, "dec1.bias"));
    // Split the concat gradient: upsampled features first, then the skip.
    const std::size_t up_size = static_cast<std::size_t>(t.f.channels() * t.a1.spatial());
    Tensor dup(t.f.channels(), t.a1.depth(), t.a1.height(), t.a1.width());
    std::copy(dc.data.begin(), dc.data.begin() + static_cast<std::ptrdiff_t>(up_size), dup.data.begin());
    std::copy(dc.data.begin() + static_cast<std::ptrdiff_t>(up_size), dc.data.end(), da1.data.begin());
    const Tensor df_dec = nn::upsample2_backward(dup);
    for (std::size_t i = 0; i < df_total.size(); ++i) df_total.data[i] += df_dec.data[i];
  }
  nn::relu_backward_inplace(t.f, df_total);
  unnorm(df_total, "enc2", t.n2);
  const Tensor dp1 = nn::conv3d_backward(t.p1, view(params, "enc2.weight"), df_total, cfg_.kernel,
                                         view(grad, "enc2.weight"), view(grad, "enc2.bias"));
  const Tensor da1_pool = nn::avgpool2_backward(dp1);
  for (std::size_t i = 0; i < da1.size(); ++i) da1.data[i] += da1_pool.data[i];
  nn::relu_backward_inplace(t.a1, da1);
  unnorm(da1, "enc1", t.n1);
  nn::conv3d_backward(t.x, view(params, "enc1.weight"), da1, cfg_.kernel, view(grad, "enc1.weight"),
                      view(grad, "enc1.bias"), /*need_dx=*/false);
}

Network::GlobalHead Network::forward_global_head(std::span<const double> params, const Tensor& f) const {
  GlobalHead h;
  h.in_shape = f.shape;
  h.pooled = nn::global_avgpool(f);
  h.scaled = h.pooled;
  if (cfg_.head_standardize) {
    const auto mean = view(params, "glob.mean"), var = view(params, "glob.var");
    for (std::size_t c = 0; c < h.scaled.size(); ++c) h.scaled[c] = (h.scaled[c] - mean[c]) / std::sqrt(var[c] + kStatEps);
  }
  h.hidden = nn::linear(h.scaled, view(params, "glob1.weight"), view(params, "glob1.bias"),
                        static_cast<std::size_t>(cfg_.global_hidden));
  for (auto& v : h.hidden) v = v > 0.0 ? v : 0.0;
  h.out = nn::linear(h.hidden, view(params, "glob2.weight"), view(params, "glob2.bias"),
                     static_cast<std::size_t>(cfg_.global_dim));
  h.embedding = nn::l2_normalize(h.out, h.norm);
  return h;
}

Tensor Network::backward_global_head(std::span<const double> params, const GlobalHead& h,
                                     std::span<const double> demb, std::span<double> grad) const {
  const auto dout = nn::l2_normalize_backward(h.embedding, h.norm, demb);
  auto dhidden = nn::linear_backward(h.hidden, view(params, "glob2.weight"), dout, view(grad, "glob2.weight"),
                                     view(grad, "glob2.bias"));
  for (std::size_t i = 0; i < dhidden.size(); ++i) {
    if (!(h.hidden[i] > 0.0)) dhidden[i] = 0.0;
  }
  auto dpooled = nn::linear_backward(h.scaled, view(params, "glob1.weight"), dhidden, view(grad, "glob1.weight"),
                                     view(grad, "glob1.bias"));
  if (cfg_.head_standardize) {
    const auto var = view(params, "glob.var");
    for (std::size_t c = 0; c < dpooled.size(); ++c) dpooled[c] /= std::sqrt(var[c] + kStatEps);
  }
  return nn::global_avgpool_backward(h.in_shape, dpooled);
}

Network::LocalHead Network::forward_local_head(std::span<const double> params, const Tensor& z) const {
  if (z.channels() != cfg_.local_channels) throw ShapeError("local head expects local_channels input channels");
  LocalHead h;
  h.in_shape = z.shape;
  h.pooled = nn::grid_pool(z, cfg_.local_grid);
  h.scaled = h.pooled;
  if (cfg_.head_standardize) {
    const auto mean = view(params, "loc.mean"), var = view(params, "loc.var");
    for (std::int64_t c = 0; c < h.scaled.channels(); ++c) {
      const auto cu = static_cast<std::size_t>(c);
      for (auto& v : h.scaled.channel(c)) v = (v - mean[cu]) / std::sqrt(var[cu] + kStatEps);
    }
  }
  h.hidden = nn::conv3d(h.scaled, view(params, "loc1.weight"), view(params, "loc1.bias"), cfg_.local_hidden, 1);
  nn::relu_inplace(h.hidden);
  h.out = nn::conv3d(h.hidden, view(params, "loc2.weight"), view(params, "loc2.bias"), cfg_.local_dim, 1);
  h.embedding = nn::l2_normalize(h.out.data, h.norm);
  return h;
}

Tensor Network::backward_local_head(std::span<const double> params, const LocalHead& h,
                                    std::span<const double> demb, std::span<double> grad) const {
  Tensor dout(h.out.channels(), 1, cfg_.local_grid, cfg_.local_grid);
  dout.data = nn::l2_normalize_backward(h.embedding, h.norm, demb);
  Tensor dhidden = nn::conv3d_backward(h.hidden, view(params, "loc2.weight"), dout, 1, view(grad, "loc2.weight"),
                                       view(grad, "loc2.bias"));
  nn::relu_backward_inplace(h.hidden, dhidden);
  Tensor dpooled = nn::conv3d_backward(h.scaled, view(params, "loc1.weight"), dhidden, 1, view(grad, "loc1.weight"),
                                       view(grad, "loc1.bias"));
  if (cfg_.head_standardize) {
    const auto var = view(params, "loc.var");
    for (std::int64_t c = 0; c < dpooled.channels(); ++c) {
      for (auto& v : dpooled.channel(c)) v /= std::sqrt(var[static_cast<std::size_t>(c)] + kStatEps);
    }
  }
  return nn::grid_pool_backward(h.in_shape, dpooled, cfg_.local_grid);
}

Tensor Network::forward_reconstruction(std::span<const double> params, const Tensor& z) const {
  Tensor r = nn::conv3d(z, view(params, "recon.weight"), view(params, "recon.bias"), 1, 1);
  nn::sigmoid_inplace(r);
  return r;
}

Tensor Network::backward_reconstruction(std::span<const double> params, const Tensor& z, const Tensor& recon,
                                        const Tensor& drecon, std::span<double> grad) const {
  Tensor dpre = drecon;
  nn::sigmoid_backward_inplace(recon, dpre);
  return nn::conv3d_backward(z, view(params, "recon.weight"), dpre, 1, view(grad, "recon.weight"),
                             view(grad, "recon.bias"));
}

Embedding forward_global(const Network& net, std::span<const double> params, const Tensor& patch) {
  const auto trunk = net.forward_trunk(params, patch, /*decode=*/false);
  auto head = net.forward_global_head(params, trunk.f);
  return {net.global_shape(), std::move(head.embedding)};
}

LocalForward forward_local(const Network& net, std::span<const double> params, const Tensor& patch) {
  auto trunk = net.forward_trunk(params, patch, /*decode=*/true);
  auto head = net.forward_local_head(params, trunk.z);
  return {std::move(trunk.z), {net.local_shape(), std::move(head.embedding)}};
}

std::vector<double> momentum_update(std::span<const double> theta, std::span<const double> epsilon, double beta) {
  if (theta.size() != epsilon.size()) throw ShapeError("theta and epsilon differ in shape");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("momentum beta must lie in [0, 1]");
  std::vector<double> out(epsilon.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = beta * epsilon[i] + (1.0 - beta) * theta[i];
  return out;
}

void save_checkpoint(const Network& net, const ModelParams& params, const std::filesystem::path& path,
                     const nlohmann::json& extra) {
  if (params.theta.size() != net.num_params() || params.epsilon.size() != net.num_params()) {
    throw ShapeError("checkpoint parameters do not match the network");
  }
  nlohmann::json header = extra;
  header["model"] = net.config();
  header["count"] = net.num_params();
  header["dtype"] = "f32";
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& b : net.blocks()) layers.push_back({{"name", b.name}, {"shape", b.shape}});
  header["layers"] = layers;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << header.dump() << '\n';
  std::vector<float> buf(net.num_params());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(params.theta[i]);
  io::write_f32(os, buf);
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(params.epsilon[i]);
  io::write_f32(os, buf);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError("missing checkpoint header");
  Checkpoint ck;
  std::size_t count = 0;
  try {
    ck.header = nlohmann::json::parse(line);
    ck.config = ck.header.at("model").get<ModelConfig>();
    count = ck.header.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad checkpoint header: ") + e.what());
  }
  const Network net(ck.config);
  if (count != net.num_params()) throw DataError("checkpoint parameter count does not match its model config");
  std::vector<float> buf(count);
  io::read_f32(is, buf);
  ck.params.theta.assign(buf.begin(), buf.end());
  io::read_f32(is, buf);
  ck.params.epsilon.assign(buf.begin(), buf.end());
  return ck;
}

}  // namespace spade
