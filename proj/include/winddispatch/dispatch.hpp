// Storage dispatch: discretizes the wind and demand SDEs into per-step Markov
// kernels, solves the fossil-energy-minimizing control problem by backward
// induction over (SoC, wind, demand) bins, and cross-checks with a greedy
// baseline, an exhaustive scenario-tree oracle, and continuous-path rollouts.
//
// Per-step accounting (energies in joules): wind harvest w = P(v) dt serves
// demand d dt directly first; the surplus may be stored at efficiency eta_w up
// to capacity and charge-rate limits (charge_fraction control), the remainder
// is spilled; any shortfall is served from storage (discharge control, bounded
// by SoC, rate, and the shortfall itself) and the rest from the auxiliary
// fossil source at cost a/eta_a.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "winddispatch/power.hpp"
#include "winddispatch/random.hpp"
#include "winddispatch/sde.hpp"
#include "winddispatch/util.hpp"

namespace winddispatch {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / 1.4142135623730950488016887242097); }

// Row-stochastic one-step transition matrix over equal-width bins of [lo, hi];
// rows are Euler-Gaussian masses from each bin center, end bins absorb tails.
struct TransitionKernel {
  int bins = 0;
  double lo = 0.0, hi = 0.0;
  std::vector<double> prob;  // bins x bins, row-major

  double width() const { return (hi - lo) / static_cast<double>(bins); }
  double center(int i) const { return lo + (static_cast<double>(i) + 0.5) * width(); }

  int bin_of(double x) const {
    if (x <= lo) return 0;
    if (x >= hi) return bins - 1;
    int i = static_cast<int>((x - lo) / width());
    return std::clamp(i, 0, bins - 1);
  }

  double at(int i, int j) const { return prob[static_cast<std::size_t>(i) * bins + j]; }

  void validate() const {
    require(bins >= 2, "kernel needs at least 2 bins");
    require(prob.size() == static_cast<std::size_t>(bins) * bins, "kernel size mismatch");
    for (int i = 0; i < bins; ++i) {
      double sum = 0.0;
      for (int j = 0; j < bins; ++j) {
        require(at(i, j) >= 0.0, "kernel entries must be nonnegative");
        sum += at(i, j);
      }
      require(std::abs(sum - 1.0) <= 1e-9, "kernel row must sum to 1");
    }
  }

  // Left eigenvector by power iteration; good enough for moment checks.
  std::vector<double> stationary(int max_iters = 200000, double tol = 1e-13) const {
    std::vector<double> mu(bins, 1.0 / bins), next(bins);
    for (int it = 0; it < max_iters; ++it) {
      std::fill(next.begin(), next.end(), 0.0);
      for (int i = 0; i < bins; ++i) {
        double m = mu[i];
        if (m == 0.0) continue;
        const double* row = prob.data() + static_cast<std::size_t>(i) * bins;
        for (int j = 0; j < bins; ++j) next[j] += m * row[j];
      }
      double diff = 0.0;
      for (int j = 0; j < bins; ++j) diff += std::abs(next[j] - mu[j]);
      mu.swap(next);
      if (diff < tol) break;
    }
    return mu;
  }

  double stationary_mean() const {
    auto mu = stationary();
    double m = 0.0;
    for (int i = 0; i < bins; ++i) m += mu[i] * center(i);
    return m;
  }
};

inline TransitionKernel discretize(const SdeModel& model, int bins, double lo, double hi,
                                   double dt) {
  model.validate();
  require(bins >= 2, "bins must be >= 2");
  require(std::isfinite(lo) && std::isfinite(hi) && lo < hi, "degenerate range");
  require(dt > 0.0 && std::isfinite(dt), "dt must be positive");

  TransitionKernel k;
  k.bins = bins;
  k.lo = lo;
  k.hi = hi;
  k.prob.assign(static_cast<std::size_t>(bins) * bins, 0.0);
  double w = k.width();
  std::vector<double> cdf(static_cast<std::size_t>(bins) - 1);
  for (int i = 0; i < bins; ++i) {
    double c = k.center(i);
    double mean = c + forward(model.drift, c) * dt;
    double sd = forward(model.diffusion, c) * std::sqrt(dt);
    double* row = k.prob.data() + static_cast<std::size_t>(i) * bins;
    if (!(sd > 0.0) || !std::isfinite(sd)) {
      row[k.bin_of(mean)] = 1.0;
      continue;
    }
    for (int j = 1; j < bins; ++j) cdf[j - 1] = normal_cdf((lo + j * w - mean) / sd);
    row[0] = cdf[0];
    for (int j = 1; j < bins - 1; ++j) row[j] = std::max(0.0, cdf[j] - cdf[j - 1]);
    row[bins - 1] = std::max(0.0, 1.0 - cdf[bins - 2]);
    double sum = 0.0;
    for (int j = 0; j < bins; ++j) sum += row[j];
    for (int j = 0; j < bins; ++j) row[j] /= sum;
  }
  return k;
}

struct DispatchProblem {
  double eta_w = 1.0;          // wind-storage charge efficiency, (0,1]
  double eta_a = 1.0;          // auxiliary conversion efficiency, (0,1]
  double capacity = 0.0;       // battery capacity, J
  double max_charge = 0.0;     // W
  double max_discharge = 0.0;  // W
  int horizon_steps = 1;
  double dt = 1.0;             // seconds
  SdeModel wind_model;
  SdeModel demand_model;
  PowerParams power_params;
  int soc_bins = 2, wind_bins = 2, demand_bins = 2;
  double wind_min = 0.0, wind_max = 1.0;      // m/s
  double demand_min = 0.0, demand_max = 1.0;  // W
  double initial_soc = 0.0;                   // J
  double initial_wind = 0.0;                  // m/s
  double initial_demand = 0.0;                // W
  bool wind_through_battery_only = false;
  bool terminal_soc_credit = false;

  double soc_spacing() const {
    return soc_bins > 1 ? capacity / static_cast<double>(soc_bins - 1) : 0.0;
  }
  double soc_point(int i) const { return static_cast<double>(i) * soc_spacing(); }

  int snap_soc(double soc) const {
    if (capacity <= 0.0 || soc_bins <= 1) return 0;
    long i = std::lround(soc / soc_spacing());
    return static_cast<int>(std::clamp<long>(i, 0, soc_bins - 1));
  }

  void validate() const {
    require(eta_w > 0.0 && eta_w <= 1.0, "eta_w must be in (0,1]");
    require(eta_a > 0.0 && eta_a <= 1.0, "eta_a must be in (0,1]");
    require(capacity >= 0.0 && std::isfinite(capacity), "capacity must be >= 0");
    require(max_charge >= 0.0 && std::isfinite(max_charge), "max_charge must be >= 0");
    require(max_discharge >= 0.0 && std::isfinite(max_discharge), "max_discharge must be >= 0");
    require(horizon_steps >= 1, "horizon_steps must be >= 1");
    require(dt > 0.0 && std::isfinite(dt), "dt must be positive");
    require(soc_bins >= 2 && wind_bins >= 2 && demand_bins >= 2, "bins must be >= 2");
    require(wind_min >= 0.0 && wind_min < wind_max && std::isfinite(wind_max),
            "wind range must be well-ordered and nonnegative");
    require(demand_min >= 0.0 && demand_min < demand_max && std::isfinite(demand_max),
            "demand range must be well-ordered and nonnegative");
    require(initial_soc >= 0.0 && initial_soc <= capacity + 1e-12, "initial_soc out of range");
    require(initial_wind >= 0.0 && std::isfinite(initial_wind), "initial_wind must be >= 0");
    require(initial_demand >= 0.0 && std::isfinite(initial_demand), "initial_demand must be >= 0");
    wind_model.validate();
    demand_model.validate();
    require(wind_model.state_kind == StateKind::WindSpeed, "wind model must be wind_speed");
    require(demand_model.state_kind == StateKind::DemandRate, "demand model must be demand_rate");
    power_params.validate();
  }
};

struct StepOutcome {
  double wind_direct = 0.0;  // J served straight from wind
  double discharge = 0.0;    // J delivered from storage
  double aux = 0.0;          // J served from the auxiliary source
  double store = 0.0;        // J of wind-side energy sent to storage
  double spill = 0.0;        // J of surplus neither delivered nor stored
  double soc_next = 0.0;
  double cost = 0.0;         // fossil J, aux / eta_a
};

// Canonical one-step dynamics, shared by the solver, the greedy baseline,
// kernel-exact policy evaluation and continuous rollouts.
inline StepOutcome dispatch_step(const DispatchProblem& pb, double soc, double wind_energy,
                                 double demand_energy, double charge_fraction,
                                 double discharge_request) {
  StepOutcome o;
  o.wind_direct = pb.wind_through_battery_only ? 0.0 : std::min(wind_energy, demand_energy);
  double surplus = wind_energy - o.wind_direct;
  double shortfall = demand_energy - o.wind_direct;
  double discharge_cap = std::min(soc, pb.max_discharge * pb.dt);
  o.discharge = std::max(0.0, std::min({discharge_request, shortfall, discharge_cap}));
  o.aux = shortfall - o.discharge;
  double soc_mid = soc - o.discharge;
  double headroom = (pb.capacity - soc_mid) / pb.eta_w;
  o.store = std::max(0.0, std::min({charge_fraction * surplus, pb.max_charge * pb.dt, headroom}));
  o.spill = surplus - o.store;
  o.soc_next = std::clamp(soc_mid + pb.eta_w * o.store, 0.0, pb.capacity);
  o.cost = o.aux / pb.eta_a;
  return o;
}

struct ValueTable {
  int stages = 0, soc_bins = 0, wind_bins = 0, demand_bins = 0;
  std::vector<double> value;  // (stages+1) x soc x wind x demand, stage-major

  std::size_t index(int t, int s, int w, int d) const {
    return ((static_cast<std::size_t>(t) * soc_bins + s) * wind_bins + w) * demand_bins + d;
  }
  double at(int t, int s, int w, int d) const { return value[index(t, s, w, d)]; }
  double& at(int t, int s, int w, int d) { return value[index(t, s, w, d)]; }
};

struct Policy {
  int stages = 0, soc_bins = 0, wind_bins = 0, demand_bins = 0;
  std::vector<double> charge_fraction;  // stages x soc x wind x demand, in [0,1]
  std::vector<double> discharge_J;      // same layout, <= min(soc, max_discharge*dt)

  std::size_t index(int t, int s, int w, int d) const {
    return ((static_cast<std::size_t>(t) * soc_bins + s) * wind_bins + w) * demand_bins + d;
  }
};

inline void validate_policy(const Policy& pol, const DispatchProblem& pb) {
  require(pol.stages == pb.horizon_steps && pol.soc_bins == pb.soc_bins &&
              pol.wind_bins == pb.wind_bins && pol.demand_bins == pb.demand_bins,
          "policy dimensions do not match the problem");
  std::size_t n = static_cast<std::size_t>(pol.stages) * pol.soc_bins * pol.wind_bins *
                  pol.demand_bins;
  require(pol.charge_fraction.size() == n && pol.discharge_J.size() == n, "policy table size");
  double rate_cap = pb.max_discharge * pb.dt;
  for (int t = 0; t < pol.stages; ++t)
    for (int s = 0; s < pol.soc_bins; ++s)
      for (int w = 0; w < pol.wind_bins; ++w)
        for (int d = 0; d < pol.demand_bins; ++d) {
          std::size_t i = pol.index(t, s, w, d);
          double cf = pol.charge_fraction[i];
          double dj = pol.discharge_J[i];
          require(cf >= 0.0 && cf <= 1.0, "charge_fraction out of [0,1]");
          require(dj >= 0.0 && dj <= std::min(pb.soc_point(s), rate_cap) + 1e-9,
                  "discharge exceeds SoC or rate bound");
        }
}

namespace detail {

constexpr int kControlPoints = 11;  // 0/10 .. 10/10 per control dimension

struct MdpTables {
  TransitionKernel kw, kd;
  std::vector<double> wind_energy;    // per wind bin, J per step
  std::vector<double> demand_energy;  // per demand bin, J per step
  std::vector<double> cost;           // (s,iw,id,cd) stage cost, fossil J
  std::vector<int> next_bin;          // (s,iw,id,cd,cc) next SoC bin

  std::size_t state_index(const DispatchProblem& pb, int s, int iw, int id) const {
    return (static_cast<std::size_t>(s) * pb.wind_bins + iw) * pb.demand_bins + id;
  }
};

inline double discharge_request(const DispatchProblem& pb, int soc_bin, int cd) {
  double cap = std::min(pb.soc_point(soc_bin), pb.max_discharge * pb.dt);
  return cap * static_cast<double>(cd) / (kControlPoints - 1);
}

inline MdpTables build_mdp_tables(const DispatchProblem& pb) {
  MdpTables t;
  t.kw = discretize(pb.wind_model, pb.wind_bins, pb.wind_min, pb.wind_max, pb.dt);
  t.kd = discretize(pb.demand_model, pb.demand_bins, pb.demand_min, pb.demand_max, pb.dt);
  t.wind_energy.resize(pb.wind_bins);
  for (int i = 0; i < pb.wind_bins; ++i)
    t.wind_energy[i] = instantaneous_power(pb.power_params, t.kw.center(i)) * pb.dt;
  t.demand_energy.resize(pb.demand_bins);
  for (int i = 0; i < pb.demand_bins; ++i) t.demand_energy[i] = t.kd.center(i) * pb.dt;

  std::size_t n_states =
      static_cast<std::size_t>(pb.soc_bins) * pb.wind_bins * pb.demand_bins;
  t.cost.resize(n_states * kControlPoints);
  t.next_bin.resize(n_states * kControlPoints * kControlPoints);
  parallel_for(n_states, [&](std::size_t st) {
    int id = static_cast<int>(st % pb.demand_bins);
    int iw = static_cast<int>((st / pb.demand_bins) % pb.wind_bins);
    int s = static_cast<int>(st / (static_cast<std::size_t>(pb.demand_bins) * pb.wind_bins));
    double soc = pb.soc_point(s);
    for (int cd = 0; cd < kControlPoints; ++cd) {
      double request = discharge_request(pb, s, cd);
      for (int cc = 0; cc < kControlPoints; ++cc) {
        double phi = static_cast<double>(cc) / (kControlPoints - 1);
        StepOutcome o = dispatch_step(pb, soc, t.wind_energy[iw], t.demand_energy[id], phi,
                                      request);
        if (cc == 0) t.cost[st * kControlPoints + cd] = o.cost;
        t.next_bin[(st * kControlPoints + cd) * kControlPoints + cc] = pb.snap_soc(o.soc_next);
      }
    }
  });
  return t;
}

// expect(s', iw, id) = E_{jw,jd}[ V(t+1, s', jw, jd) ] under the product kernel.
inline void expectation_table(const DispatchProblem& pb, const MdpTables& t,
                              const ValueTable& v, int t_next, std::vector<double>& expect,
                              std::vector<double>& scratch) {
  int nW = pb.wind_bins, nD = pb.demand_bins;
  expect.resize(static_cast<std::size_t>(pb.soc_bins) * nW * nD);
  scratch.resize(static_cast<std::size_t>(nW) * nD);
  for (int s = 0; s < pb.soc_bins; ++s) {
    // scratch(jw, id) = sum_jd kd(id, jd) V(t_next, s, jw, jd)
    for (int jw = 0; jw < nW; ++jw)
      for (int id = 0; id < nD; ++id) {
        double acc = 0.0;
        for (int jd = 0; jd < nD; ++jd) acc += t.kd.at(id, jd) * v.at(t_next, s, jw, jd);
        scratch[static_cast<std::size_t>(jw) * nD + id] = acc;
      }
    for (int iw = 0; iw < nW; ++iw)
      for (int id = 0; id < nD; ++id) {
        double acc = 0.0;
        for (int jw = 0; jw < nW; ++jw)
          acc += t.kw.at(iw, jw) * scratch[static_cast<std::size_t>(jw) * nD + id];
        expect[t.state_index(pb, s, iw, id)] = acc;
      }
  }
}

inline void fill_terminal(const DispatchProblem& pb, ValueTable& v) {
  for (int s = 0; s < pb.soc_bins; ++s) {
    double tv = pb.terminal_soc_credit ? -pb.soc_point(s) / pb.eta_a : 0.0;
    for (int w = 0; w < pb.wind_bins; ++w)
      for (int d = 0; d < pb.demand_bins; ++d) v.at(pb.horizon_steps, s, w, d) = tv;
  }
}

}  // namespace detail

// Backward induction over the discretized system. Controls: 11-point grids in
// charge fraction and discharge; ties break toward lower discharge, then lower
// charge fraction.
inline std::pair<Policy, ValueTable> solve_dp(const DispatchProblem& pb) {
  pb.validate();
  auto tables = detail::build_mdp_tables(pb);
  const int n_stages = pb.horizon_steps;
  const int nS = pb.soc_bins, nW = pb.wind_bins, nD = pb.demand_bins;

  ValueTable v{n_stages, nS, nW, nD, {}};
  v.value.assign(static_cast<std::size_t>(n_stages + 1) * nS * nW * nD, 0.0);
  detail::fill_terminal(pb, v);
  Policy pol{n_stages, nS, nW, nD, {}, {}};
  pol.charge_fraction.assign(static_cast<std::size_t>(n_stages) * nS * nW * nD, 0.0);
  pol.discharge_J.assign(pol.charge_fraction.size(), 0.0);

  std::vector<double> expect, scratch;
  std::size_t n_states = static_cast<std::size_t>(nS) * nW * nD;
  for (int t = n_stages - 1; t >= 0; --t) {
    detail::expectation_table(pb, tables, v, t + 1, expect, scratch);
    parallel_for(n_states, [&](std::size_t st) {
      int id = static_cast<int>(st % nD);
      int iw = static_cast<int>((st / nD) % nW);
      int s = static_cast<int>(st / (static_cast<std::size_t>(nD) * nW));
      double best = std::numeric_limits<double>::infinity();
      int best_cd = 0, best_cc = 0;
      for (int cd = 0; cd < detail::kControlPoints; ++cd) {
        double stage_cost = tables.cost[st * detail::kControlPoints + cd];
        const int* next_row =
            tables.next_bin.data() + (st * detail::kControlPoints + cd) * detail::kControlPoints;
        for (int cc = 0; cc < detail::kControlPoints; ++cc) {
          double val =
              stage_cost + expect[tables.state_index(pb, next_row[cc], iw, id)];
          if (val < best) {
            best = val;
            best_cd = cd;
            best_cc = cc;
          }
        }
      }
      if (!std::isfinite(best)) throw divergence_error("backward induction went non-finite", t);
      v.at(t, s, iw, id) = best;
      double phi = static_cast<double>(best_cc) / (detail::kControlPoints - 1);
      StepOutcome o = dispatch_step(pb, pb.soc_point(s), tables.wind_energy[iw],
                                    tables.demand_energy[id], phi,
                                    detail::discharge_request(pb, s, best_cd));
      std::size_t pi = pol.index(t, s, iw, id);
      pol.charge_fraction[pi] = phi;
      pol.discharge_J[pi] = o.discharge;
    });
  }
  return {std::move(pol), std::move(v)};
}

// Stage-independent baseline: discharge as much as the shortfall allows, store
// every surplus joule up to the limits.
inline Policy greedy_policy(const DispatchProblem& pb) {
  pb.validate();
  auto tables = detail::build_mdp_tables(pb);
  Policy pol{pb.horizon_steps, pb.soc_bins, pb.wind_bins, pb.demand_bins, {}, {}};
  std::size_t n = static_cast<std::size_t>(pb.horizon_steps) * pb.soc_bins * pb.wind_bins *
                  pb.demand_bins;
  pol.charge_fraction.assign(n, 1.0);
  pol.discharge_J.assign(n, 0.0);
  for (int s = 0; s < pb.soc_bins; ++s)
    for (int iw = 0; iw < pb.wind_bins; ++iw)
      for (int id = 0; id < pb.demand_bins; ++id) {
        double request = std::min(pb.soc_point(s), pb.max_discharge * pb.dt);
        StepOutcome o = dispatch_step(pb, pb.soc_point(s), tables.wind_energy[iw],
                                      tables.demand_energy[id], 1.0, request);
        for (int t = 0; t < pb.horizon_steps; ++t)
          pol.discharge_J[pol.index(t, s, iw, id)] = o.discharge;
      }
  return pol;
}

// Policy that never touches storage; the no-storage reference cost.
inline Policy no_storage_policy(const DispatchProblem& pb) {
  pb.validate();
  Policy pol{pb.horizon_steps, pb.soc_bins, pb.wind_bins, pb.demand_bins, {}, {}};
  std::size_t n = static_cast<std::size_t>(pb.horizon_steps) * pb.soc_bins * pb.wind_bins *
                  pb.demand_bins;
  pol.charge_fraction.assign(n, 0.0);
  pol.discharge_J.assign(n, 0.0);
  return pol;
}

// Kernel-exact expected cost-to-go of a fixed policy (no optimization).
inline ValueTable policy_value(const Policy& pol, const DispatchProblem& pb) {
  pb.validate();
  validate_policy(pol, pb);
  auto tables = detail::build_mdp_tables(pb);
  const int n_stages = pb.horizon_steps;
  const int nS = pb.soc_bins, nW = pb.wind_bins, nD = pb.demand_bins;
  ValueTable v{n_stages, nS, nW, nD, {}};
  v.value.assign(static_cast<std::size_t>(n_stages + 1) * nS * nW * nD, 0.0);
  detail::fill_terminal(pb, v);
  std::vector<double> expect, scratch;
  std::size_t n_states = static_cast<std::size_t>(nS) * nW * nD;
  for (int t = n_stages - 1; t >= 0; --t) {
    detail::expectation_table(pb, tables, v, t + 1, expect, scratch);
    parallel_for(n_states, [&](std::size_t st) {
      int id = static_cast<int>(st % nD);
      int iw = static_cast<int>((st / nD) % nW);
      int s = static_cast<int>(st / (static_cast<std::size_t>(nD) * nW));
      std::size_t pi = pol.index(t, s, iw, id);
      StepOutcome o = dispatch_step(pb, pb.soc_point(s), tables.wind_energy[iw],
                                    tables.demand_energy[id], pol.charge_fraction[pi],
                                    pol.discharge_J[pi]);
      v.at(t, s, iw, id) =
          o.cost + expect[tables.state_index(pb, pb.snap_soc(o.soc_next), iw, id)];
    });
  }
  return v;
}

// Expected optimal cost from the initial state by exhaustive recursion over
// the scenario tree. Dynamics are re-derived inline on purpose so this path
// shares no solver code beyond the kernels. Controls collapse to their
// distinct (stage cost, next bin) outcomes before recursion; the guard counts
// decision nodes.
inline double brute_force_optimal(const DispatchProblem& pb, long max_nodes = 1000000) {
  pb.validate();
  TransitionKernel kw = discretize(pb.wind_model, pb.wind_bins, pb.wind_min, pb.wind_max, pb.dt);
  TransitionKernel kd =
      discretize(pb.demand_model, pb.demand_bins, pb.demand_min, pb.demand_max, pb.dt);

  std::vector<double> wind_e(pb.wind_bins), demand_e(pb.demand_bins);
  for (int i = 0; i < pb.wind_bins; ++i) {
    double c = kw.center(i);
    wind_e[i] = 0.5 * pb.power_params.rho * pb.power_params.area * c * c * c * pb.dt;
  }
  for (int i = 0; i < pb.demand_bins; ++i) demand_e[i] = kd.center(i) * pb.dt;

  double spacing = pb.soc_bins > 1 ? pb.capacity / (pb.soc_bins - 1) : 0.0;
  auto snap = [&](double soc) {
    if (pb.capacity <= 0.0) return 0;
    return static_cast<int>(
        std::clamp<long>(std::lround(soc / spacing), 0, pb.soc_bins - 1));
  };

  long nodes = 0;
  std::function<double(int, int, int, int)> expected_cost = [&](int t, int s, int iw,
                                                                int id) -> double {
    if (t == pb.horizon_steps)
      return pb.terminal_soc_credit ? -(static_cast<double>(s) * spacing) / pb.eta_a : 0.0;
    if (++nodes > max_nodes)
      throw size_guard_error("brute-force scenario tree exceeds node guard");

    double soc = static_cast<double>(s) * spacing;
    double w = wind_e[iw];
    double de = demand_e[id];
    double direct = pb.wind_through_battery_only ? 0.0 : std::min(w, de);
    double surplus = w - direct;
    double shortfall = de - direct;
    double d_cap = std::min(soc, pb.max_discharge * pb.dt);

    // min immediate cost per reachable next bin
    std::vector<double> best_cost(pb.soc_bins, std::numeric_limits<double>::infinity());
    for (int cd = 0; cd < 11; ++cd) {
      double req = d_cap * cd / 10.0;
      double drawn = std::max(0.0, std::min(req, shortfall));
      double aux = shortfall - drawn;
      double stage = aux / pb.eta_a;
      double mid = soc - drawn;
      for (int cc = 0; cc < 11; ++cc) {
        double want = surplus * cc / 10.0;
        double stored =
            std::max(0.0, std::min({want, pb.max_charge * pb.dt, (pb.capacity - mid) / pb.eta_w}));
        double nxt = std::clamp(mid + pb.eta_w * stored, 0.0, pb.capacity);
        int nb = snap(nxt);
        if (stage < best_cost[nb]) best_cost[nb] = stage;
      }
    }

    double best = std::numeric_limits<double>::infinity();
    for (int nb = 0; nb < pb.soc_bins; ++nb) {
      if (!std::isfinite(best_cost[nb])) continue;
      double e = 0.0;
      for (int jw = 0; jw < pb.wind_bins; ++jw)
        for (int jd = 0; jd < pb.demand_bins; ++jd)
          e += kw.at(iw, jw) * kd.at(id, jd) * expected_cost(t + 1, nb, jw, jd);
      best = std::min(best, best_cost[nb] + e);
    }
    return best;
  };

  return expected_cost(0, snap(pb.initial_soc), kw.bin_of(pb.initial_wind),
                       kd.bin_of(pb.initial_demand));
}

struct RolloutStats {
  double mean_fossil_J = 0.0;
  double std_fossil_J = 0.0;
  double mean_spill_J = 0.0;
  double std_spill_J = 0.0;
  long violations = 0;  // must be 0 in every accepted run
  long n_rollouts = 0;
};

struct TraceRow {
  int step;
  double v, d, soc, wind_direct, charge, discharge, aux, spill;
};

namespace detail {

struct RolloutResult {
  double fossil = 0.0;
  double spill = 0.0;
};

// One continuous-path rollout; policy applied via nearest-bin lookup.
// Asserts the per-step balance d*dt = wind_direct + discharge + aux.
inline RolloutResult simulate_rollout(const Policy& pol, const DispatchProblem& pb,
                                      const TransitionKernel& kw, const TransitionKernel& kd,
                                      std::uint64_t wind_seed, std::uint64_t demand_seed,
                                      std::vector<TraceRow>* trace) {
  NormalStream wind_stream(wind_seed);
  NormalStream demand_stream(demand_seed);
  double v = pb.initial_wind;
  double d = pb.initial_demand;
  double soc = pb.initial_soc;
  RolloutResult out;
  for (int t = 0; t < pb.horizon_steps; ++t) {
    std::size_t pi = pol.index(t, pb.snap_soc(soc), kw.bin_of(v), kd.bin_of(d));
    double wind_energy = instantaneous_power(pb.power_params, v) * pb.dt;
    double demand_energy = d * pb.dt;
    StepOutcome o = dispatch_step(pb, soc, wind_energy, demand_energy, pol.charge_fraction[pi],
                                  pol.discharge_J[pi]);
    double balance = demand_energy - (o.wind_direct + o.discharge + o.aux);
    if (std::abs(balance) > 1e-9 * std::max(1.0, demand_energy))
      throw balance_error("energy balance violated at step " + std::to_string(t) +
                          " (residual " + format_g17(balance) + " J)");
    if (o.soc_next < -1e-9 || o.soc_next > pb.capacity + 1e-9)
      throw balance_error("SoC left [0, capacity] at step " + std::to_string(t));
    if (trace)
      trace->push_back(TraceRow{t, v, d, soc, o.wind_direct, o.store, o.discharge, o.aux,
                                o.spill});
    out.fossil += o.cost;
    out.spill += o.spill;
    soc = o.soc_next;
    v = euler_step(pb.wind_model, v, pb.dt, wind_stream.next());
    if (!std::isfinite(v)) throw divergence_error("wind path diverged", t);
    d = euler_step(pb.demand_model, d, pb.dt, demand_stream.next());
    if (!std::isfinite(d)) throw divergence_error("demand path diverged", t);
  }
  return out;
}

}  // namespace detail

// Monte Carlo evaluation on continuous SDE paths (not the binned kernels).
// Rollout r uses normal-stream seeds (seed + 2r, seed + 2r + 1).
inline RolloutStats evaluate_policy(const Policy& pol, const DispatchProblem& pb, long n_rollouts,
                                    std::uint64_t seed) {
  pb.validate();
  validate_policy(pol, pb);
  require(n_rollouts >= 1, "n_rollouts must be >= 1");
  TransitionKernel kw = discretize(pb.wind_model, pb.wind_bins, pb.wind_min, pb.wind_max, pb.dt);
  TransitionKernel kd =
      discretize(pb.demand_model, pb.demand_bins, pb.demand_min, pb.demand_max, pb.dt);

  std::vector<detail::RolloutResult> results(static_cast<std::size_t>(n_rollouts));
  parallel_for(static_cast<std::size_t>(n_rollouts), [&](std::size_t r) {
    results[r] = detail::simulate_rollout(pol, pb, kw, kd, seed + 2 * r, seed + 2 * r + 1,
                                          nullptr);
  });

  RolloutStats stats;
  stats.n_rollouts = n_rollouts;
  double mf = 0.0, ms = 0.0;
  for (const auto& r : results) {
    mf += r.fossil;
    ms += r.spill;
  }
  mf /= static_cast<double>(n_rollouts);
  ms /= static_cast<double>(n_rollouts);
  double vf = 0.0, vs = 0.0;
  for (const auto& r : results) {
    vf += (r.fossil - mf) * (r.fossil - mf);
    vs += (r.spill - ms) * (r.spill - ms);
  }
  stats.mean_fossil_J = mf;
  stats.mean_spill_J = ms;
  stats.std_fossil_J = n_rollouts > 1 ? std::sqrt(vf / static_cast<double>(n_rollouts - 1)) : 0.0;
  stats.std_spill_J = n_rollouts > 1 ? std::sqrt(vs / static_cast<double>(n_rollouts - 1)) : 0.0;
  return stats;
}

// Per-step trace of the first rollout (same streams as evaluate_policy's r=0).
inline std::vector<TraceRow> rollout_trace(const Policy& pol, const DispatchProblem& pb,
                                           std::uint64_t seed) {
  pb.validate();
  validate_policy(pol, pb);
  TransitionKernel kw = discretize(pb.wind_model, pb.wind_bins, pb.wind_min, pb.wind_max, pb.dt);
  TransitionKernel kd =
      discretize(pb.demand_model, pb.demand_bins, pb.demand_min, pb.demand_max, pb.dt);
  std::vector<TraceRow> trace;
  detail::simulate_rollout(pol, pb, kw, kd, seed, seed + 1, &trace);
  return trace;
}

inline void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "step,v,d,soc,wind_direct,charge,discharge,aux,spill\n";
  for (const auto& r : trace)
    out << r.step << ',' << format_g17(r.v) << ',' << format_g17(r.d) << ',' << format_g17(r.soc)
        << ',' << format_g17(r.wind_direct) << ',' << format_g17(r.charge) << ','
        << format_g17(r.discharge) << ',' << format_g17(r.aux) << ',' << format_g17(r.spill)
        << '\n';
}

// ---- JSON layouts: flat arrays with explicit stage,soc,wind,demand order ----

inline void to_json(nlohmann::json& j, const Policy& p) {
  j = nlohmann::json{{"horizon_steps", p.stages},
                     {"soc_bins", p.soc_bins},
                     {"wind_bins", p.wind_bins},
                     {"demand_bins", p.demand_bins},
                     {"index_order", "stage,soc,wind,demand"},
                     {"charge_fraction", p.charge_fraction},
                     {"discharge_J", p.discharge_J}};
}

inline void from_json(const nlohmann::json& j, Policy& p) {
  p.stages = j.at("horizon_steps").get<int>();
  p.soc_bins = j.at("soc_bins").get<int>();
  p.wind_bins = j.at("wind_bins").get<int>();
  p.demand_bins = j.at("demand_bins").get<int>();
  p.charge_fraction = j.at("charge_fraction").get<std::vector<double>>();
  p.discharge_J = j.at("discharge_J").get<std::vector<double>>();
  require(p.stages >= 1 && p.soc_bins >= 2 && p.wind_bins >= 2 && p.demand_bins >= 2,
          "policy dimensions invalid");
  std::size_t n = static_cast<std::size_t>(p.stages) * p.soc_bins * p.wind_bins * p.demand_bins;
  require(p.charge_fraction.size() == n && p.discharge_J.size() == n,
          "policy array length mismatch");
  for (double v : p.charge_fraction) require_finite(v, "charge_fraction");
  for (double v : p.discharge_J) require_finite(v, "discharge_J");
}

inline void to_json(nlohmann::json& j, const ValueTable& v) {
  j = nlohmann::json{{"stages", v.stages},
                     {"soc_bins", v.soc_bins},
                     {"wind_bins", v.wind_bins},
                     {"demand_bins", v.demand_bins},
                     {"index_order", "stage,soc,wind,demand"},
                     {"value_J", v.value}};
}

inline void from_json(const nlohmann::json& j, ValueTable& v) {
  v.stages = j.at("stages").get<int>();
  v.soc_bins = j.at("soc_bins").get<int>();
  v.wind_bins = j.at("wind_bins").get<int>();
  v.demand_bins = j.at("demand_bins").get<int>();
  v.value = j.at("value_J").get<std::vector<double>>();
  std::size_t n = static_cast<std::size_t>(v.stages + 1) * v.soc_bins * v.wind_bins *
                  v.demand_bins;
  require(v.value.size() == n, "value array length mismatch");
  for (double x : v.value) require_finite(x, "value entry");
}

inline void to_json(nlohmann::json& j, const RolloutStats& s) {
  j = nlohmann::json{{"n_rollouts", s.n_rollouts},
                     {"mean_fossil_J", s.mean_fossil_J},
                     {"std_fossil_J", s.std_fossil_J},
                     {"mean_spill_J", s.mean_spill_J},
                     {"std_spill_J", s.std_spill_J},
                     {"violations", s.violations}};
}

}  // namespace winddispatch
