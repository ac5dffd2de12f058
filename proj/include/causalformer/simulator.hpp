#pragma once

#include <cstdint>
#include <vector>

#include "causalformer/kernel/rng.hpp"
#include "causalformer/kernel/types.hpp"

namespace causalformer {

/// Izhikevich parameters of one neuron and the Uniform(0,1) draw behind them.
struct NeuronParams {
  double a = 0.02;
  double b = -0.1;
  double c_reset = -65.0;
  double d = 8.0;
  double theta = 0.0;
};

/**
 * Directed random network. adjacency(i, j) == 1 means neuron j projects onto
 * neuron i; the diagonal is always zero.
 */
struct NetworkTopology {
  Index n = 0;
  double p = 0.0;
  std::uint64_t seed = 0;
  Eigen::MatrixXi adjacency;
  std::vector<bool> excitatory;
  std::vector<NeuronParams> neurons;

  Index excitatory_count() const;
};

/// Coefficients of dv/dt = quadratic v^2 + linear v + constant - u + I.
struct IzhikevichConstants {
  double quadratic = 0.04;
  double linear = 4.1;
  double constant = 108.0;
  double threshold_mv = 30.0;
  double v0 = -65.0;
};

struct SimulationConfig {
  double input_mean = 5.0;
  double input_var = 5.0;
  double strength = 5.0;
  IzhikevichConstants constants;
};

/// Recorded membrane potential (post-update, pre-reset), recovery and spikes.
struct SimulationTrace {
  Matrix v;  // T x n, mV
  Matrix u;  // T x n
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> spikes;
  double dt_ms = 1.0;
  std::uint64_t seed = 0;
  SimulationConfig config;

  Index steps() const { return v.rows(); }
  Index neurons() const { return v.cols(); }
};

struct StepResult {
  double v = 0.0;  // post-update, pre-reset
  double u = 0.0;
  bool spiked = false;
  double v_next = 0.0;  // state the next step starts from
  double u_next = 0.0;
};

/// Excitatory share of the population (4:1 ratio).
Index excitatory_count_for(Index n);

/// Neuron parameters for a given theta; the sampling overload draws theta from `rng`.
NeuronParams neuron_params_for(bool is_excitatory, double theta);
NeuronParams sample_neuron_params(bool is_excitatory, Rng& rng);

/**
 * Random topology: off-diagonal Bernoulli(p) entries drawn row-major, then the
 * type labels (first round(0.8 n) excitatory) shuffled, then one theta per
 * neuron in index order.
 */
NetworkTopology generate_topology(Index n, double p, Rng& rng);

/// One forward-Euler step of 1 ms for both v and u, then threshold and reset.
StepResult izhikevich_step(double v, double u, double input, const NeuronParams& params,
                           const IzhikevichConstants& constants = {});

/**
 * Simulate T steps from v0 = -65, u0 = b v0. The input at step t+1 is the
 * fresh noise N(mean, var) plus +/- strength for every presynaptic neuron that
 * spiked at step t (sign given by the presynaptic type).
 */
SimulationTrace simulate(const NetworkTopology& topology, Index steps, const SimulationConfig& config,
                         Rng& rng);

}  // namespace causalformer
