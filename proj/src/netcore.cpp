#include "driftlab/netcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "driftlab/error.hpp"
#include "driftlab/seeding.hpp"

namespace driftlab {

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double activate(Activation a, double z) {
  switch (a) {
    case Activation::Softplus: return softplus(z);
    case Activation::Tanh: return std::tanh(z);
  }
  return z;
}

double activate_grad(Activation a, double z) {
  switch (a) {
    case Activation::Softplus: return sigmoid(z);
    case Activation::Tanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
  }
  return 1.0;
}

// out[i, o] = sum_k in[i, k] * W[o, k] + b[o]
Matrix affine(const Matrix& in, const Matrix& weight, const Vector& bias) {
  const std::size_t n = in.rows(), d_in = in.cols(), d_out = weight.rows();
  Matrix out(n, d_out);
  for (std::size_t i = 0; i < n; ++i) {
    auto x = in.row(i);
    for (std::size_t o = 0; o < d_out; ++o) {
      auto w = weight.row(o);
      double acc = bias[o];
      for (std::size_t k = 0; k < d_in; ++k) acc += x[k] * w[k];
      out(i, o) = acc;
    }
  }
  return out;
}

void check_structure(const ExtractorParams& theta) {
  if (theta.layers.empty()) raise(ErrorKind::Config, "extractor has no layers");
  if (theta.activations.size() + 1 != theta.layers.size()) {
    raise(ErrorKind::Config, "extractor needs one activation per hidden layer");
  }
  for (std::size_t l = 1; l < theta.layers.size(); ++l) {
    if (theta.layers[l].weight.cols() != theta.layers[l - 1].weight.rows()) {
      raise(ErrorKind::Shape, "extractor layer " + std::to_string(l) + " does not compose");
    }
  }
}

void check_classifier(const ExtractorParams& theta, const ClassifierParams& phi) {
  if (phi.weight.cols() != theta.feature_dim() || phi.bias.size() != phi.weight.rows()) {
    raise(ErrorKind::Shape, "classifier width does not match feature dimension");
  }
}

ExtractorGrad backward_impl(const ExtractorParams& theta, const ClassifierParams& phi,
                           const ForwardTrace& trace, const Matrix& d_logits) {
  check_structure(theta);
  check_classifier(theta, phi);
  const std::size_t n = trace.input.rows();
  const std::size_t depth = theta.layers.size();
  if (trace.pre.size() != depth || trace.post.size() != depth) {
    raise(ErrorKind::Shape, "trace layer count does not match extractor");
  }
  require_shape(d_logits, n, phi.num_classes(), "dLogits");
  for (std::size_t l = 0; l < depth; ++l) {
    require_shape(trace.pre[l], n, theta.layers[l].weight.rows(), "trace pre-activation");
  }

  // dF = dLogits * W_phi
  const std::size_t d_feat = theta.feature_dim();
  Matrix d_h(n, d_feat);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < phi.num_classes(); ++k) {
      const double g = d_logits(i, k);
      if (g == 0.0) continue;
      auto w = phi.weight.row(k);
      for (std::size_t f = 0; f < d_feat; ++f) d_h(i, f) += g * w[f];
    }
  }
  ExtractorGrad out;
  out.layers.resize(depth);

  for (std::size_t l = depth; l-- > 0;) {
    const DenseLayer& layer = theta.layers[l];
    const std::size_t d_out = layer.weight.rows(), d_in = layer.weight.cols();
    const Matrix& below = l == 0 ? trace.input : trace.post[l - 1];

    Matrix d_z = d_h;
    if (l + 1 < depth) {
      const Activation a = theta.activations[l];
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t o = 0; o < d_out; ++o) d_z(i, o) *= activate_grad(a, trace.pre[l](i, o));
      }
    }

    DenseLayer& g = out.layers[l];
    g.weight = Matrix(d_out, d_in);
    g.bias.assign(d_out, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto x = below.row(i);
      for (std::size_t o = 0; o < d_out; ++o) {
        const double dz = d_z(i, o);
        g.bias[o] += dz;
        auto gw = g.weight.row(o);
        for (std::size_t k = 0; k < d_in; ++k) gw[k] += dz * x[k];
      }
    }

    if (l > 0) {
      Matrix d_below(n, d_in);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t o = 0; o < d_out; ++o) {
          const double dz = d_z(i, o);
          auto w = layer.weight.row(o);
          for (std::size_t k = 0; k < d_in; ++k) d_below(i, k) += dz * w[k];
        }
      }
      d_h = std::move(d_below);
    }
  }
  return out;
}

void append_bytes(std::vector<unsigned char>& out, std::span<const double> values) {
  const std::size_t offset = out.size();
  out.resize(offset + values.size_bytes());
  if (!values.empty()) std::memcpy(out.data() + offset, values.data(), values.size_bytes());
}

std::string fnv1a_hex(const std::vector<unsigned char>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kHex[h & 0xf];
    h >>= 4;
  }
  return s;
}

nlohmann::json layer_to_json(const DenseLayer& layer) {
  return {{"rows", layer.weight.rows()},
          {"cols", layer.weight.cols()},
          {"weight", layer.weight.values()},
          {"bias", layer.bias}};
}

DenseLayer layer_from_json(const nlohmann::json& j) {
  DenseLayer layer;
  layer.weight = Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                        j.at("weight").get<std::vector<double>>());
  layer.bias = j.at("bias").get<Vector>();
  if (layer.bias.size() != layer.weight.rows()) raise(ErrorKind::Shape, "bias length mismatch");
  return layer;
}

}  // namespace

Activation activation_from_string(const std::string& name) {
  if (name == "softplus") return Activation::Softplus;
  if (name == "tanh") return Activation::Tanh;
  raise(ErrorKind::Config, "unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  return a == Activation::Softplus ? "softplus" : "tanh";
}

std::vector<std::size_t> ExtractorParams::dims() const {
  std::vector<std::size_t> d{input_dim()};
  for (const auto& l : layers) d.push_back(l.weight.rows());
  return d;
}

double init_weight_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

ExtractorParams init_extractor(std::uint64_t seed, std::span<const std::size_t> dims,
                               Activation activation) {
  if (dims.size() < 2) raise(ErrorKind::Config, "extractor dims need at least two entries");
  for (std::size_t d : dims) {
    if (d == 0) raise(ErrorKind::Config, "extractor dims must be positive");
  }
  ExtractorParams theta;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    Rng rng(seed_of({seed, 0x657874ULL, l}));
    DenseLayer layer{Matrix(dims[l + 1], dims[l]), Vector(dims[l + 1], 0.0)};
    const double sd = init_weight_std(dims[l]);
    for (double& w : layer.weight.flat()) w = sd * rng.normal();
    theta.layers.push_back(std::move(layer));
  }
  theta.activations.assign(theta.layers.size() - 1, activation);
  return theta;
}

ClassifierParams init_classifier(std::uint64_t seed, std::size_t feature_dim,
                                 std::size_t num_classes) {
  if (feature_dim == 0 || num_classes == 0) raise(ErrorKind::Config, "classifier dims must be positive");
  ClassifierParams phi{Matrix(num_classes, feature_dim), Vector(num_classes, 0.0)};
  Rng rng(seed_of({seed, 0x636c73ULL}));
  const double sd = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  for (double& w : phi.weight.flat()) w = sd * rng.normal();
  return phi;
}

ForwardResult forward(const ExtractorParams& theta, const ClassifierParams& phi,
                      const Matrix& batch) {
  check_structure(theta);
  check_classifier(theta, phi);
  if (batch.cols() != theta.input_dim()) {
    raise(ErrorKind::Shape, "batch width " + std::to_string(batch.cols()) +
                                " does not match input dimension " +
                                std::to_string(theta.input_dim()));
  }
  ForwardResult r;
  r.trace.input = batch;
  const Matrix* h = &batch;
  for (std::size_t l = 0; l < theta.layers.size(); ++l) {
    Matrix z = affine(*h, theta.layers[l].weight, theta.layers[l].bias);
    Matrix a = z;
    if (l + 1 < theta.layers.size()) {
      for (double& v : a.flat()) v = activate(theta.activations[l], v);
    }
    r.trace.pre.push_back(std::move(z));
    r.trace.post.push_back(std::move(a));
    h = &r.trace.post.back();
  }
  r.features = r.trace.post.back();
  r.logits = affine(r.features, phi.weight, phi.bias);
  return r;
}

Matrix predict_logits(const ExtractorParams& theta, const ClassifierParams& phi,
                      const Matrix& batch) {
  return forward(theta, phi, batch).logits;
}

Vector softmax_row(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) raise(ErrorKind::Domain, "softmax temperature must be positive");
  Vector out(logits.size());
  if (logits.empty()) return out;
  double top = logits[0];
  for (double z : logits) top = std::max(top, z);
  double total = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp((logits[k] - top) / temperature);
    total += out[k];
  }
  for (double& p : out) p /= total;
  return out;
}

Matrix softmax(const Matrix& logits, double temperature) {
  if (!(temperature > 0.0)) raise(ErrorKind::Domain, "softmax temperature must be positive");
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    Vector p = softmax_row(logits.row(i), temperature);
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  return out;
}

ExtractorGrad backward(const ExtractorParams& theta, const ClassifierParams& phi,
                       const ForwardTrace& trace, const Matrix& d_logits) {
  return backward_impl(theta, phi, trace, d_logits);
}

FullGrad backward_full(const ExtractorParams& theta, const ClassifierParams& phi,
                       const ForwardTrace& trace, const Matrix& d_logits) {
  FullGrad g{backward_impl(theta, phi, trace, d_logits), {}};
  const Matrix& features = trace.post.back();
  const std::size_t n = features.rows(), k_count = phi.num_classes(), d = features.cols();
  g.classifier.weight = Matrix(k_count, d);
  g.classifier.bias.assign(k_count, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto f = features.row(i);
    for (std::size_t k = 0; k < k_count; ++k) {
      const double dl = d_logits(i, k);
      g.classifier.bias[k] += dl;
      auto gw = g.classifier.weight.row(k);
      for (std::size_t j = 0; j < d; ++j) gw[j] += dl * f[j];
    }
  }
  return g;
}

void accumulate(ExtractorGrad& into, const ExtractorGrad& add) {
  if (into.layers.empty()) {
    into = add;
    return;
  }
  if (into.layers.size() != add.layers.size()) raise(ErrorKind::Shape, "gradient layer count mismatch");
  for (std::size_t l = 0; l < into.layers.size(); ++l) {
    auto dst = into.layers[l].weight.flat();
    auto src = add.layers[l].weight.flat();
    if (dst.size() != src.size()) raise(ErrorKind::Shape, "gradient shape mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    for (std::size_t o = 0; o < into.layers[l].bias.size(); ++o) {
      into.layers[l].bias[o] += add.layers[l].bias[o];
    }
  }
}

OptimizerState make_optimizer_state(std::span<const DenseLayer> like) {
  OptimizerState s;
  for (const auto& l : like) {
    s.velocity.push_back({Matrix(l.weight.rows(), l.weight.cols()), Vector(l.bias.size(), 0.0)});
  }
  return s;
}

namespace {

void sgd_update(std::span<double> p, std::span<const double> g, std::span<double> v,
                const SgdOptions& o) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double grad = g[i] + o.weight_decay * p[i];
    v[i] = o.momentum * v[i] + grad;
    const double step = o.nesterov ? grad + o.momentum * v[i] : v[i];
    p[i] -= o.lr * step;
  }
}

}  // namespace

void sgd_step(std::span<DenseLayer> params, std::span<const DenseLayer> grads,
              OptimizerState& state, const SgdOptions& opts) {
  if (opts.lr < 0.0) raise(ErrorKind::Domain, "learning rate must be non-negative");
  if (params.size() != grads.size() || params.size() != state.velocity.size()) {
    raise(ErrorKind::Shape, "optimizer layer count mismatch");
  }
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto& p = params[l];
    const auto& g = grads[l];
    auto& v = state.velocity[l];
    if (p.weight.rows() != g.weight.rows() || p.weight.cols() != g.weight.cols() ||
        p.weight.rows() != v.weight.rows() || p.weight.cols() != v.weight.cols() ||
        p.bias.size() != g.bias.size() || p.bias.size() != v.bias.size()) {
      raise(ErrorKind::Shape, "optimizer shape mismatch at layer " + std::to_string(l));
    }
  }
  for (std::size_t l = 0; l < params.size(); ++l) {
    sgd_update(params[l].weight.flat(), grads[l].weight.flat(), state.velocity[l].weight.flat(), opts);
    sgd_update(params[l].bias, grads[l].bias, state.velocity[l].bias, opts);
  }
  ++state.steps;
}

void sgd_step(ExtractorParams& theta, const ExtractorGrad& grad, OptimizerState& state,
              const SgdOptions& opts) {
  sgd_step(std::span<DenseLayer>(theta.layers), std::span<const DenseLayer>(grad.layers), state, opts);
}

std::size_t parameter_count(std::span<const DenseLayer> layers) {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

std::vector<double> flatten(std::span<const DenseLayer> layers) {
  std::vector<double> out;
  out.reserve(parameter_count(layers));
  for (const auto& l : layers) {
    out.insert(out.end(), l.weight.flat().begin(), l.weight.flat().end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

void unflatten(std::span<const double> flat, std::span<DenseLayer> layers) {
  if (flat.size() != parameter_count(layers)) raise(ErrorKind::Shape, "flat parameter length mismatch");
  std::size_t at = 0;
  for (auto& l : layers) {
    auto w = l.weight.flat();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(at),
              flat.begin() + static_cast<std::ptrdiff_t>(at + w.size()), w.begin());
    at += w.size();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(at),
              flat.begin() + static_cast<std::ptrdiff_t>(at + l.bias.size()), l.bias.begin());
    at += l.bias.size();
  }
}

GradCheckResult grad_check(const FlatLoss& loss, std::span<const double> point,
                           std::span<const double> analytic, const GradCheckOptions& opts) {
  if (!(opts.eps > 0.0) || !std::isfinite(opts.eps)) {
    raise(ErrorKind::Domain, "finite-difference step must be positive");
  }
  if (point.size() != analytic.size()) raise(ErrorKind::Shape, "analytic gradient length mismatch");

  std::vector<std::size_t> coords(point.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (opts.max_coords > 0 && coords.size() > opts.max_coords) {
    Rng rng(opts.subsample_seed);
    for (std::size_t i = 0; i < opts.max_coords; ++i) {
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    }
    coords.resize(opts.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  std::vector<double> probe(point.begin(), point.end());
  auto eval = [&] {
    const double v = loss(probe);
    if (!std::isfinite(v)) raise(ErrorKind::Numeric, "loss evaluator returned a non-finite value");
    return v;
  };

  GradCheckResult result;
  for (std::size_t i : coords) {
    const double saved = probe[i];
    probe[i] = saved + opts.eps;
    const double up = eval();
    probe[i] = saved - opts.eps;
    const double down = eval();
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * opts.eps);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), opts.denom_floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_rel_error || result.checked == 0) {
      result.max_rel_error = rel;
      result.worst_index = i;
      result.analytic = a;
      result.numeric = numeric;
    }
    ++result.checked;
  }
  return result;
}

GradCheckResult grad_check(const std::function<double(const ExtractorParams&)>& loss,
                           const ExtractorParams& theta, const ExtractorGrad& analytic,
                           const GradCheckOptions& opts) {
  ExtractorParams scratch = theta;
  FlatLoss flat_loss = [&](std::span<const double> flat) {
    unflatten(flat, scratch.layers);
    return loss(scratch);
  };
  const std::vector<double> point = flatten(theta.layers);
  const std::vector<double> grad = flatten(analytic.layers);
  return grad_check(flat_loss, point, grad, opts);
}

nlohmann::json to_json(const ExtractorParams& theta) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : theta.layers) layers.push_back(layer_to_json(l));
  nlohmann::json acts = nlohmann::json::array();
  for (auto a : theta.activations) acts.push_back(to_string(a));
  return {{"dims", theta.dims()}, {"activations", acts}, {"layers", layers}};
}

nlohmann::json to_json(const ClassifierParams& phi) {
  return layer_to_json(DenseLayer{phi.weight, phi.bias});
}

nlohmann::json to_json(const OptimizerState& state) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : state.velocity) layers.push_back(layer_to_json(l));
  return {{"steps", state.steps}, {"velocity", layers}};
}

ExtractorParams extractor_from_json(const nlohmann::json& j) {
  ExtractorParams theta;
  for (const auto& l : j.at("layers")) theta.layers.push_back(layer_from_json(l));
  for (const auto& a : j.at("activations")) theta.activations.push_back(activation_from_string(a.get<std::string>()));
  check_structure(theta);
  return theta;
}

ClassifierParams classifier_from_json(const nlohmann::json& j) {
  DenseLayer l = layer_from_json(j);
  return {std::move(l.weight), std::move(l.bias)};
}

OptimizerState optimizer_from_json(const nlohmann::json& j) {
  OptimizerState s;
  s.steps = j.at("steps").get<std::uint64_t>();
  for (const auto& l : j.at("velocity")) s.velocity.push_back(layer_from_json(l));
  return s;
}

std::vector<unsigned char> param_bytes(std::span<const DenseLayer> layers) {
  std::vector<unsigned char> out;
  for (const auto& l : layers) {
    append_bytes(out, l.weight.flat());
    append_bytes(out, l.bias);
  }
  return out;
}

std::vector<unsigned char> param_bytes(const ClassifierParams& phi) {
  std::vector<unsigned char> out;
  append_bytes(out, phi.weight.flat());
  append_bytes(out, phi.bias);
  return out;
}

std::string digest(const ExtractorParams& theta) { return fnv1a_hex(param_bytes(theta.layers)); }
std::string digest(const ClassifierParams& phi) { return fnv1a_hex(param_bytes(phi)); }

}  // namespace driftlab
