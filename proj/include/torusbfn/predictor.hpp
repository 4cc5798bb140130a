#pragma once

// Dense predictor: belief features in, per-modality heads out. The torus head
// emits an offset pair (u, v) per dimension and predicts wrap(atan2(u, v) + m).

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "torusbfn/autodiff.hpp"
#include "torusbfn/error.hpp"
#include "torusbfn/random.hpp"
#include "torusbfn/state.hpp"

namespace torusbfn {

struct PredictorConfig {
  int slots = 4;
  int classes = 4;
  int torus_dims = 2;
  int lattice_dims = 3;
  int hidden = 128;
  int layers = 2;
  int time_frequencies = 4;
  double c_final = 1000.0;
  bool entropy_conditioning = true;
  bool equivariant_features = false;
  // Lattice head output is mu^L + lattice_scale * raw.
  double lattice_scale = 1.0;

  void validate() const {
    if (slots < 1 || classes < 2 || torus_dims < 1 || lattice_dims < 1) {
      throw DomainError("predictor: slots, torus and lattice dims must be >= 1 and classes >= 2");
    }
    if (hidden < 1 || layers < 1) throw DomainError("predictor: hidden width and layer count must be >= 1");
    if (time_frequencies < 0) throw DomainError("predictor: time_frequencies must be >= 0");
    if (!(c_final > 0.0)) throw DomainError("predictor: c_final must be positive");
    if (!(lattice_scale > 0.0) || !std::isfinite(lattice_scale)) throw DomainError("predictor: lattice_scale must be positive");
  }

  int torus_feature_count() const {
    return equivariant_features ? torus_dims * (torus_dims - 1) : 2 * torus_dims;
  }
  int input_dim() const {
    return slots * classes + torus_feature_count() + torus_dims + lattice_dims + 2 * time_frequencies;
  }
  int output_dim() const { return slots * classes + 2 * torus_dims + lattice_dims; }
};

inline void to_json(nlohmann::json& j, const PredictorConfig& c) {
  j = {{"slots", c.slots},
       {"classes", c.classes},
       {"torus_dims", c.torus_dims},
       {"lattice_dims", c.lattice_dims},
       {"hidden", c.hidden},
       {"layers", c.layers},
       {"time_frequencies", c.time_frequencies},
       {"c_final", c.c_final},
       {"entropy_conditioning", c.entropy_conditioning},
       {"equivariant_features", c.equivariant_features},
       {"lattice_scale", c.lattice_scale}};
}

inline void from_json(const nlohmann::json& j, PredictorConfig& c) {
  PredictorConfig d;
  c.slots = j.value("slots", d.slots);
  c.classes = j.value("classes", d.classes);
  c.torus_dims = j.value("torus_dims", d.torus_dims);
  c.lattice_dims = j.value("lattice_dims", d.lattice_dims);
  c.hidden = j.value("hidden", d.hidden);
  c.layers = j.value("layers", d.layers);
  c.time_frequencies = j.value("time_frequencies", d.time_frequencies);
  c.c_final = j.value("c_final", d.c_final);
  c.entropy_conditioning = j.value("entropy_conditioning", d.entropy_conditioning);
  c.equivariant_features = j.value("equivariant_features", d.equivariant_features);
  c.lattice_scale = j.value("lattice_scale", d.lattice_scale);
}

/// FNV-1a over the canonical JSON dump.
inline std::uint64_t config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline PredictorConfig toggle_entropy_conditioning(PredictorConfig c) {
  c.entropy_conditioning = !c.entropy_conditioning;
  return c;
}

/// weights[l] is (in x out), biases[l] is (1 x out); the last pair is the joint head.
struct PredictorParams {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::MatrixXd> biases;

  std::size_t tensor_count() const { return weights.size() + biases.size(); }
  Eigen::MatrixXd& tensor(std::size_t k) { return k < weights.size() ? weights[k] : biases[k - weights.size()]; }
  const Eigen::MatrixXd& tensor(std::size_t k) const {
    return k < weights.size() ? weights[k] : biases[k - weights.size()];
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < tensor_count(); ++k) n += static_cast<std::size_t>(tensor(k).size());
    return n;
  }
  PredictorParams zeros_like() const {
    PredictorParams z = *this;
    for (std::size_t k = 0; k < z.tensor_count(); ++k) z.tensor(k).setZero();
    return z;
  }
};

/// Column offsets of the heads inside the joint output.
struct HeadLayout {
  Eigen::Index atoms = 0;
  Eigen::Index atoms_width = 0;
  Eigen::Index torus_u = 0;
  Eigen::Index torus_v = 0;
  Eigen::Index lattice = 0;

  explicit HeadLayout(const PredictorConfig& c)
      : atoms(0),
        atoms_width(c.slots * c.classes),
        torus_u(atoms_width),
        torus_v(atoms_width + c.torus_dims),
        lattice(atoms_width + 2 * c.torus_dims) {}
};

/// Uniform fan-in hidden layers; zero output weights with the v-bias at 1, so
/// the untrained net predicts uniform classes, F = m^F and L = mu^L.
inline PredictorParams init_params(const PredictorConfig& c, Rng& rng) {
  c.validate();
  PredictorParams p;
  int in = c.input_dim();
  for (int l = 0; l < c.layers; ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Eigen::MatrixXd w(in, c.hidden);
    for (Eigen::Index k = 0; k < w.size(); ++k) w(k) = bound * (2.0 * uniform01(rng) - 1.0);
    Eigen::MatrixXd b(1, c.hidden);
    for (Eigen::Index k = 0; k < b.size(); ++k) b(k) = bound * (2.0 * uniform01(rng) - 1.0);
    p.weights.push_back(std::move(w));
    p.biases.push_back(std::move(b));
    in = c.hidden;
  }
  p.weights.push_back(Eigen::MatrixXd::Zero(in, c.output_dim()));
  Eigen::MatrixXd head_bias = Eigen::MatrixXd::Zero(1, c.output_dim());
  const HeadLayout layout(c);
  head_bias.middleCols(layout.torus_v, c.torus_dims).setOnes();
  p.biases.push_back(std::move(head_bias));
  return p;
}

inline void check_shapes(const PredictorConfig& c, const PredictorParams& p) {
  const auto layers = static_cast<std::size_t>(c.layers) + 1;
  if (p.weights.size() != layers || p.biases.size() != layers) throw ShapeError("predictor: wrong layer count");
  int in = c.input_dim();
  for (std::size_t l = 0; l < layers; ++l) {
    const int out = l + 1 == layers ? c.output_dim() : c.hidden;
    if (p.weights[l].rows() != in || p.weights[l].cols() != out || p.biases[l].rows() != 1 ||
        p.biases[l].cols() != out) {
      throw ShapeError("predictor: parameter shape mismatch at layer " + std::to_string(l));
    }
    in = out;
  }
}

// ---------------------------------------------------------------------------
// Features

/// One feature row per (state, t). c enters only through log(1 + c) / log(1 + c_final).
inline Eigen::MatrixXd make_features(const PredictorConfig& c, std::span<const JointParamState> states,
                                     std::span<const double> times) {
  if (states.size() != times.size()) throw ShapeError("features: states/times length mismatch");
  const auto rows = static_cast<Eigen::Index>(states.size());
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(rows, c.input_dim());
  const double log_norm = std::log1p(c.c_final);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const JointParamState& s = states[r];
    if (s.atoms.theta.rows() != c.slots || s.atoms.theta.cols() != c.classes ||
        s.torus.dims() != static_cast<std::size_t>(c.torus_dims) || s.lattice.mean.size() != c.lattice_dims) {
      throw ShapeError("features: state shape does not match predictor config");
    }
    Eigen::Index col = 0;
    for (int a = 0; a < c.slots; ++a) {
      for (int k = 0; k < c.classes; ++k) f(r, col++) = s.atoms.theta(a, k);
    }
    if (c.equivariant_features) {
      for (int d = 0; d < c.torus_dims; ++d) {
        for (int e = d + 1; e < c.torus_dims; ++e) {
          const double diff = s.torus.mean[d].value() - s.torus.mean[e].value();
          f(r, col++) = std::cos(diff);
          f(r, col++) = std::sin(diff);
        }
      }
    } else {
      for (int d = 0; d < c.torus_dims; ++d) {
        f(r, col++) = std::cos(s.torus.mean[d].value());
        f(r, col++) = std::sin(s.torus.mean[d].value());
      }
    }
    for (int d = 0; d < c.torus_dims; ++d) {
      f(r, col++) = c.entropy_conditioning ? std::log1p(s.torus.concentration[d]) / log_norm : 0.0;
    }
    for (int d = 0; d < c.lattice_dims; ++d) f(r, col++) = s.lattice.mean[d];
    const double t = times[r];
    for (int k = 0; k < c.time_frequencies; ++k) {
      const double w = kPi * std::ldexp(1.0, k);
      f(r, col++) = std::sin(w * t);
      f(r, col++) = std::cos(w * t);
    }
  }
  return f;
}

/// Column index of the first log-concentration feature.
inline Eigen::Index concentration_feature_offset(const PredictorConfig& c) {
  return c.slots * c.classes + c.torus_feature_count();
}

// ---------------------------------------------------------------------------
// Forward

struct ParamVars {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;
};

inline ParamVars record_params(ad::Tape& tape, const PredictorParams& p, bool trainable) {
  ParamVars v;
  for (const auto& w : p.weights) v.weights.push_back(trainable ? tape.variable(w) : tape.constant(w));
  for (const auto& b : p.biases) v.biases.push_back(trainable ? tape.variable(b) : tape.constant(b));
  return v;
}

/// Head outputs on the tape. f_raw = atan2(u, v) + m is left unwrapped, which is
/// harmless inside the periodic loss.
struct HeadVars {
  ad::Var atom_logits;  // B x (N K)
  ad::Var torus_raw;    // B x D
  ad::Var lattice;      // B x lattice_dims
};

inline HeadVars forward(ad::Tape& tape, const PredictorConfig& c, const ParamVars& p, const Eigen::MatrixXd& features,
                        const Eigen::MatrixXd& torus_means, const Eigen::MatrixXd& lattice_means) {
  if (features.cols() != c.input_dim()) throw ShapeError("forward: feature width mismatch");
  if (torus_means.rows() != features.rows() || torus_means.cols() != c.torus_dims) {
    throw ShapeError("forward: torus mean matrix shape mismatch");
  }
  if (lattice_means.rows() != features.rows() || lattice_means.cols() != c.lattice_dims) {
    throw ShapeError("forward: lattice mean matrix shape mismatch");
  }
  ad::Var h = tape.constant(features);
  const std::size_t layers = p.weights.size();
  for (std::size_t l = 0; l < layers; ++l) {
    h = tape.add_row(tape.matmul(h, p.weights[l]), p.biases[l]);
    if (l + 1 < layers) h = tape.silu(h);
    if (!tape.value(h).allFinite()) {
      throw NumericError("forward: non-finite activation at layer " + std::to_string(l));
    }
  }
  const HeadLayout layout(c);
  HeadVars out;
  out.atom_logits = tape.cols(h, layout.atoms, layout.atoms_width);
  const ad::Var u = tape.cols(h, layout.torus_u, c.torus_dims);
  const ad::Var v = tape.cols(h, layout.torus_v, c.torus_dims);
  out.torus_raw = tape.add(tape.atan2(u, v), tape.constant(torus_means));
  // Residual around the lattice belief mean, like the torus head.
  out.lattice = tape.cols(h, layout.lattice, c.lattice_dims);
  if (c.lattice_scale != 1.0) out.lattice = tape.scale(out.lattice, c.lattice_scale);
  out.lattice = tape.add(out.lattice, tape.constant(lattice_means));
  return out;
}

inline Eigen::MatrixXd torus_mean_matrix(std::span<const JointParamState> states, int dims) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(states.size()), dims);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (int d = 0; d < dims; ++d) m(r, d) = states[r].torus.mean[d].value();
  }
  return m;
}

inline Eigen::MatrixXd lattice_mean_matrix(std::span<const JointParamState> states, int dims) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(states.size()), dims);
  for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r) = states[r].lattice.mean.head(dims).transpose();
  return m;
}

/// Plain batch prediction.
struct Prediction {
  Eigen::MatrixXd atom_logits;  // B x (N K)
  Eigen::MatrixXd torus;        // B x D, wrapped angles
  Eigen::MatrixXd lattice;      // B x lattice_dims
};

inline Prediction predict(const PredictorConfig& c, const PredictorParams& params,
                          std::span<const JointParamState> states, std::span<const double> times) {
  ad::Tape tape;
  const ParamVars pv = record_params(tape, params, false);
  const HeadVars h =
      forward(tape, c, pv, make_features(c, states, times), torus_mean_matrix(states, c.torus_dims),
              lattice_mean_matrix(states, c.lattice_dims));
  Prediction out{tape.value(h.atom_logits), tape.value(h.torus_raw), tape.value(h.lattice)};
  out.torus = out.torus.unaryExpr([](double x) { return wrap_value(x); });
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_to_json(const PredictorConfig& c, const PredictorParams& p) {
  check_shapes(c, p);
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t k = 0; k < p.tensor_count(); ++k) {
    const auto& t = p.tensor(k);
    std::vector<double> values(t.data(), t.data() + t.size());  // column-major
    tensors.push_back({{"rows", t.rows()}, {"cols", t.cols()}, {"values", values}});
  }
  const nlohmann::json cj = c;
  return {{"version", kCheckpointVersion}, {"config", cj}, {"config_hash", config_hash(cj)}, {"tensors", tensors}};
}

inline void save_checkpoint(const std::filesystem::path& path, const PredictorConfig& c, const PredictorParams& p) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(c, p).dump() << '\n';
}

struct Checkpoint {
  PredictorConfig config;
  PredictorParams params;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.at("version").get<int>() != kCheckpointVersion) throw DomainError("checkpoint: unsupported version");
  Checkpoint ck;
  ck.config = j.at("config").get<PredictorConfig>();
  ck.config.validate();
  if (j.at("config_hash").get<std::uint64_t>() != config_hash(nlohmann::json(ck.config))) {
    throw DomainError("checkpoint: config hash mismatch");
  }
  const auto& tensors = j.at("tensors");
  const std::size_t half = tensors.size() / 2;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const auto& tj = tensors[k];
    Eigen::MatrixXd t(tj.at("rows").get<Eigen::Index>(), tj.at("cols").get<Eigen::Index>());
    const auto values = tj.at("values").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(values.size()) != t.size()) throw ShapeError("checkpoint: tensor size mismatch");
    std::copy(values.begin(), values.end(), t.data());
    (k < half ? ck.params.weights : ck.params.biases).push_back(std::move(t));
  }
  check_shapes(ck.config, ck.params);
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace torusbfn
