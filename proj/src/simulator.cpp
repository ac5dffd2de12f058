#include "causalformer/simulator.hpp"

#include <cmath>
#include <string>

#include "causalformer/errors.hpp"

namespace causalformer {

Index excitatory_count_for(Index n) {
  return static_cast<Index>(std::llround(0.8 * static_cast<double>(n)));
}

Index NetworkTopology::excitatory_count() const {
  Index k = 0;
  for (bool e : excitatory) k += e ? 1 : 0;
  return k;
}

NeuronParams neuron_params_for(bool is_excitatory, double theta) {
  NeuronParams p;
  p.theta = theta;
  p.b = -0.1;
  if (is_excitatory) {
    p.a = 0.02;
    p.c_reset = -65.0 + 15.0 * theta * theta;
    p.d = 8.0 - 6.0 * theta * theta;
  } else {
    p.a = 0.02 + 0.08 * theta;
    p.c_reset = -65.0;
    p.d = 2.0;
  }
  return p;
}

NeuronParams sample_neuron_params(bool is_excitatory, Rng& rng) {
  return neuron_params_for(is_excitatory, rng.uniform());
}

NetworkTopology generate_topology(Index n, double p, Rng& rng) {
  if (n < 2) throw ConfigError("network needs at least 2 neurons, got " + std::to_string(n));
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("connection probability must lie in [0, 1]");
  NetworkTopology topo;
  topo.n = n;
  topo.p = p;
  topo.seed = rng.seed();
  topo.adjacency = Eigen::MatrixXi::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i == j) continue;
      topo.adjacency(i, j) = rng.bernoulli(p) ? 1 : 0;
    }
  }
  const Index n_exc = excitatory_count_for(n);
  topo.excitatory.assign(static_cast<std::size_t>(n), false);
  for (Index i = 0; i < n_exc; ++i) topo.excitatory[static_cast<std::size_t>(i)] = true;
  rng.shuffle(topo.excitatory.begin(), topo.excitatory.end());
  topo.neurons.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    topo.neurons.push_back(sample_neuron_params(topo.excitatory[static_cast<std::size_t>(i)], rng));
  }
  return topo;
}

StepResult izhikevich_step(double v, double u, double input, const NeuronParams& params,
                           const IzhikevichConstants& k) {
  const double dv = k.quadratic * v * v + k.linear * v + k.constant - u + input;
  const double du = params.a * (params.b * v - u);
  StepResult r;
  r.v = v + dv;
  r.u = u + du;
  r.spiked = r.v >= k.threshold_mv;
  if (r.spiked) {
    r.v_next = params.c_reset;
    r.u_next = r.u + params.d;
  } else {
    r.v_next = r.v;
    r.u_next = r.u;
  }
  return r;
}

SimulationTrace simulate(const NetworkTopology& topology, Index steps, const SimulationConfig& config,
                         Rng& rng) {
  if (steps < 1) throw ConfigError("simulation needs at least one step");
  if (config.input_var < 0) throw ConfigError("input variance must be nonnegative");
  const Index n = topology.n;
  if (topology.adjacency.rows() != n || topology.adjacency.cols() != n ||
      static_cast<Index>(topology.neurons.size()) != n ||
      static_cast<Index>(topology.excitatory.size()) != n) {
    throw DimensionError("topology fields disagree with n = " + std::to_string(n));
  }
  const double noise_std = std::sqrt(config.input_var);

  SimulationTrace trace;
  trace.v.resize(steps, n);
  trace.u.resize(steps, n);
  trace.spikes.resize(steps, n);
  trace.seed = rng.seed();
  trace.config = config;

  Vector sign(n);
  for (Index i = 0; i < n; ++i) {
    sign(i) = topology.excitatory[static_cast<std::size_t>(i)] ? config.strength : -config.strength;
  }

  Vector v = Vector::Constant(n, config.constants.v0);
  Vector u(n);
  for (Index i = 0; i < n; ++i) u(i) = topology.neurons[static_cast<std::size_t>(i)].b * config.constants.v0;
  std::vector<bool> fired(static_cast<std::size_t>(n), false);
  Vector input(n);

  for (Index t = 0; t < steps; ++t) {
    for (Index j = 0; j < n; ++j) {
      double syn = 0.0;
      for (Index i = 0; i < n; ++i) {
        if (topology.adjacency(j, i) != 0 && fired[static_cast<std::size_t>(i)]) syn += sign(i);
      }
      input(j) = config.input_mean + noise_std * rng.normal() + syn;
    }
    for (Index j = 0; j < n; ++j) {
      const auto r = izhikevich_step(v(j), u(j), input(j), topology.neurons[static_cast<std::size_t>(j)],
                                     config.constants);
      if (!std::isfinite(r.v) || !std::isfinite(r.u)) {
        throw DivergenceError("simulation diverged at step " + std::to_string(t) + " for neuron " +
                              std::to_string(j));
      }
      trace.v(t, j) = r.v;
      trace.u(t, j) = r.u;
      trace.spikes(t, j) = r.spiked;
      fired[static_cast<std::size_t>(j)] = r.spiked;
      v(j) = r.v_next;
      u(j) = r.u_next;
    }
  }
  return trace;
}

}  // namespace causalformer
