#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "castle/blockwise.hpp"
#include "castle/infer.hpp"
#include "castle/masks.hpp"
#include "castle/matrix.hpp"
#include "castle/multihead.hpp"
#include "castle/parallel.hpp"
#include "castle/recurrent.hpp"
#include "castle/rng.hpp"

namespace castle {

enum class Precision { kF64, kF32 };

struct Tolerances {
  double forward = 1e-10;     // recurrent / whole-sequence / decode agreement
  double blockwise = 1e-11;   // tiled vs whole-sequence forward
  double grad_dense = 1e-9;   // tiled backward vs dense reference (absolute)
  double grad_fd = 1e-6;      // analytic vs central differences (relative)
};

struct SuiteConfig {
  std::size_t seq_len = 16;
  std::size_t head_dim = 4;
  std::size_t heads = 2;
  std::size_t block_size = 4;
  MaskKind kind = MaskKind::castle();
  std::uint64_t seed = 0;
  std::size_t num_seeds = 5;
  Precision precision = Precision::kF64;
  Tolerances tol;
  std::vector<std::string> engines = {"blockwise", "parallel", "recurrent",
                                      "standard", "decode"};

  void validate() const {
    if (seq_len < 1 || head_dim < 1 || heads < 1 || block_size < 1 || num_seeds < 1) {
      throw std::invalid_argument("SuiteConfig: sizes must be >= 1");
    }
  }
};

// One comparison outcome. Serialized with the fixed flat schema
// {test, L, d, n, B, mode, window, seed, max_abs_err, max_rel_err, flops,
//  wall_ms, pass}; `window` is 0 when mode is "castle", and `flops` counts
// the multiply-adds issued while running the comparison (all paths included).
struct Report {
  std::string test;
  std::size_t seq_len = 0;
  std::size_t head_dim = 0;
  std::size_t heads = 0;
  std::size_t block_size = 0;
  MaskKind kind = MaskKind::castle();
  std::uint64_t seed = 0;
  double max_abs_err = 0;
  double max_rel_err = 0;
  std::uint64_t flops = 0;
  double wall_ms = 0;
  bool pass = false;
};

inline std::string mode_string(const MaskKind& kind) {
  return kind.is_swl() ? "swl" : "castle";
}

inline nlohmann::ordered_json report_json(const Report& r) {
  nlohmann::ordered_json j;
  j["test"] = r.test;
  j["L"] = r.seq_len;
  j["d"] = r.head_dim;
  j["n"] = r.heads;
  j["B"] = r.block_size;
  j["mode"] = mode_string(r.kind);
  j["window"] = r.kind.is_swl() ? r.kind.window() : 0;
  j["seed"] = r.seed;
  j["max_abs_err"] = r.max_abs_err;
  j["max_rel_err"] = r.max_rel_err;
  j["flops"] = r.flops;
  j["wall_ms"] = r.wall_ms;
  j["pass"] = r.pass;
  return j;
}

inline std::string report_json_line(const Report& r) { return report_json(r).dump(); }

inline std::string report_csv_header() {
  return "test,L,d,n,B,mode,window,seed,max_abs_err,max_rel_err,flops,wall_ms,pass";
}

inline std::string report_csv_line(const Report& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << r.test << ',' << r.seq_len << ',' << r.head_dim << ',' << r.heads << ','
     << r.block_size << ',' << mode_string(r.kind) << ','
     << (r.kind.is_swl() ? r.kind.window() : 0) << ',' << r.seed << ','
     << r.max_abs_err << ',' << r.max_rel_err << ',' << r.flops << ','
     << r.wall_ms << ',' << (r.pass ? "true" : "false");
  return os.str();
}

inline bool all_pass(const std::vector<Report>& reports) {
  return std::all_of(reports.begin(), reports.end(),
                     [](const Report& r) { return r.pass; });
}

struct Measured {
  std::uint64_t flops = 0;
  double wall_ms = 0;
};

// Runs fn once, returning the multiply-adds and wall time it consumed.
template <typename F>
Measured measure(F&& fn) {
  const std::uint64_t flops0 = FlopCounter::global().multiply_adds();
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  const auto t1 = std::chrono::steady_clock::now();
  Measured m;
  m.flops = FlopCounter::global().multiply_adds() - flops0;
  m.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return m;
}

// Central finite differences of a scalar function of a matrix, one
// coordinate at a time: (f(x + eps e) - f(x - eps e)) / (2 eps).
template <typename T>
Matrix<T> finite_diff_grad(const std::function<T(const Matrix<T>&)>& loss,
                           const Matrix<T>& x, T eps = T{1e-5}) {
  if (!(eps > T{0})) throw std::invalid_argument("finite_diff_grad: eps must be > 0");
  Matrix<T> grad(x.rows(), x.cols());
  Matrix<T> probe = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const T saved = probe(i, j);
      probe(i, j) = saved + eps;
      const T up = loss(probe);
      probe(i, j) = saved - eps;
      const T down = loss(probe);
      probe(i, j) = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::invalid_argument("finite_diff_grad: non-finite loss");
      }
      grad(i, j) = (up - down) / (2 * eps);
    }
  }
  return grad;
}

// Random instance generators (make_random_proj, make_random_head_params)
// live with ProjectedSeq / HeadParams in castle/recurrent.hpp.

template <typename T = double>
Matrix<T> make_random_input(Rng& rng, std::size_t seq_len, std::size_t hidden_dim) {
  return rng.normal_matrix<T>(seq_len, hidden_dim,
                              T{1} / std::sqrt(static_cast<T>(hidden_dim)));
}

template <typename T = double>
MultiHeadParams<T> make_random_mh_params(Rng& rng, std::size_t n_heads,
                                         std::size_t hidden_dim,
                                         std::size_t head_dim) {
  MultiHeadParams<T> p;
  for (std::size_t h = 0; h < n_heads; ++h) {
    p.heads.push_back(make_random_head_params<T>(rng, hidden_dim, head_dim));
  }
  p.w_out = rng.normal_matrix<T>(n_heads * head_dim, hidden_dim,
                                 T{1} / std::sqrt(static_cast<T>(n_heads * head_dim)));
  return p;
}

// ---- gradient comparisons ---------------------------------------------------

template <typename T>
T grads_max_abs_diff(const Grads<T>& a, const Grads<T>& b) {
  T m{};
  m = std::max(m, max_abs_diff(a.lookahead_q, b.lookahead_q));
  m = std::max(m, max_abs_diff(a.lookahead_k, b.lookahead_k));
  m = std::max(m, max_abs_diff(a.lookahead_v, b.lookahead_v));
  m = std::max(m, max_abs_diff(a.causal_q, b.causal_q));
  m = std::max(m, max_abs_diff(a.causal_k, b.causal_k));
  m = std::max(m, max_abs_diff(a.causal_v, b.causal_v));
  return m;
}

template <typename T>
T grads_max_rel_diff(const Grads<T>& a, const Grads<T>& b) {
  T m{};
  m = std::max(m, max_rel_diff(a.lookahead_q, b.lookahead_q));
  m = std::max(m, max_rel_diff(a.lookahead_k, b.lookahead_k));
  m = std::max(m, max_rel_diff(a.lookahead_v, b.lookahead_v));
  m = std::max(m, max_rel_diff(a.causal_q, b.causal_q));
  m = std::max(m, max_rel_diff(a.causal_k, b.causal_k));
  m = std::max(m, max_rel_diff(a.causal_v, b.causal_v));
  return m;
}

// Analytic gradients of sum(upstream . output) from the tiled backward.
template <typename T>
Grads<T> analytic_grads(const ProjectedSeq<T>& proj, const MaskKind& kind,
                        const BlockConfig& cfg, const Matrix<T>& upstream) {
  const BlockwiseForward<T> fwd = forward_blockwise(proj, kind, cfg);
  return backward_blockwise(proj, kind, cfg, fwd.saved, upstream);
}

// Finite-difference gradients of the same loss, differentiating one
// projection at a time through the tiled forward.
template <typename T>
Grads<T> fd_grads(const ProjectedSeq<T>& proj, const MaskKind& kind,
                  const BlockConfig& cfg, const Matrix<T>& upstream,
                  T eps = T{1e-5}) {
  const auto loss_for = [&](const ProjectedSeq<T>& p) {
    const Matrix<T> out = forward_blockwise(p, kind, cfg).output;
    T acc{};
    for (std::size_t i = 0; i < out.data().size(); ++i) {
      acc += out.data()[i] * upstream.data()[i];
    }
    return acc;
  };
  Grads<T> g = Grads<T>::zeros(proj.seq_len(), proj.head_dim());
  struct Slot {
    Matrix<T> ProjectedSeq<T>::* src;
    Matrix<T> Grads<T>::* dst;
  };
  const Slot slots[] = {
      {&ProjectedSeq<T>::lookahead_q, &Grads<T>::lookahead_q},
      {&ProjectedSeq<T>::lookahead_k, &Grads<T>::lookahead_k},
      {&ProjectedSeq<T>::lookahead_v, &Grads<T>::lookahead_v},
      {&ProjectedSeq<T>::causal_q, &Grads<T>::causal_q},
      {&ProjectedSeq<T>::causal_k, &Grads<T>::causal_k},
      {&ProjectedSeq<T>::causal_v, &Grads<T>::causal_v},
  };
  for (const Slot& slot : slots) {
    const std::function<T(const Matrix<T>&)> loss = [&](const Matrix<T>& m) {
      ProjectedSeq<T> p = proj;
      p.*(slot.src) = m;
      return loss_for(p);
    };
    g.*(slot.dst) = finite_diff_grad<T>(loss, proj.*(slot.src), eps);
  }
  return g;
}

// ---- the equivalence suite --------------------------------------------------

namespace detail {

inline std::vector<std::size_t> block_size_sweep(std::size_t seq_len) {
  std::vector<std::size_t> sweep = {1, 2, 3, 5, (seq_len + 1) / 2, seq_len};
  for (std::size_t& b : sweep) b = std::max<std::size_t>(1, std::min(b, seq_len));
  std::sort(sweep.begin(), sweep.end());
  sweep.erase(std::unique(sweep.begin(), sweep.end()), sweep.end());
  return sweep;
}

inline MaskKind wide_window_kind(std::size_t seq_len) {
  return MaskKind::castle_swl(seq_len >= 2 ? seq_len - 1 : 1);
}

}  // namespace detail

// Runs every cross-form comparison at the configured sizes, one report per
// (comparison, seed[, tile size]). All comparisons must pass for the suite to
// pass. Deterministic for a fixed config apart from the wall_ms field.
inline std::vector<Report> run_equivalence_suite(const SuiteConfig& cfg) {
  cfg.validate();
  if (cfg.precision != Precision::kF64) {
    throw std::invalid_argument(
        "run_equivalence_suite: comparisons are defined in f64 only");
  }
  using T = double;
  const std::size_t L = cfg.seq_len;
  const std::size_t d = cfg.head_dim;
  const std::size_t hidden = 4 * d;
  std::vector<Report> reports;

  const auto base_report = [&](const std::string& test, std::uint64_t seed) {
    Report r;
    r.test = test;
    r.seq_len = L;
    r.head_dim = d;
    r.heads = cfg.heads;
    r.block_size = cfg.block_size;
    r.kind = cfg.kind;
    r.seed = seed;
    return r;
  };

  for (std::size_t i = 0; i < cfg.num_seeds; ++i) {
    const std::uint64_t seed = cfg.seed + i;
    Rng rng(seed);
    const ProjectedSeq<T> proj = make_random_proj<T>(rng, L, d);

    {  // token-by-token definition vs whole-sequence closed form
      Report r = base_report("forward-recurrent-vs-parallel", seed);
      Matrix<T> a, b;
      const Measured m = measure([&] {
        a = recurrent_full(proj, cfg.kind);
        b = parallel_forward(proj, cfg.kind);
      });
      r.max_abs_err = max_abs_diff(a, b);
      r.max_rel_err = max_rel_diff(a, b);
      r.flops = m.flops;
      r.wall_ms = m.wall_ms;
      r.pass = r.max_abs_err <= cfg.tol.forward;
      reports.push_back(r);
    }

    for (const std::size_t b_size : detail::block_size_sweep(L)) {
      Report r = base_report("forward-parallel-vs-blockwise", seed);
      r.block_size = b_size;
      Matrix<T> a, b;
      const Measured m = measure([&] {
        a = parallel_forward(proj, cfg.kind);
        b = forward_blockwise(proj, cfg.kind, BlockConfig{b_size}).output;
      });
      r.max_abs_err = max_abs_diff(a, b);
      r.max_rel_err = max_rel_diff(a, b);
      r.flops = m.flops;
      r.wall_ms = m.wall_ms;
      r.pass = r.max_abs_err <= cfg.tol.blockwise;
      reports.push_back(r);
    }

    {  // whole-prompt forward vs prefill + token-by-token decode
      Report r = base_report("forward-train-vs-decode", seed);
      Rng prng(seed + 0x9e37);
      const HeadParams<T> params = make_random_head_params<T>(prng, hidden, d);
      const Matrix<T> x = make_random_input<T>(prng, L, hidden);
      const ProjectedSeq<T> from_x = project(x, params);
      const BlockConfig bc{cfg.block_size};
      double err = 0;
      const Measured m = measure([&] {
        const Matrix<T> expected = forward_blockwise(from_x, cfg.kind, bc).output;
        const std::size_t split = L / 2;
        Matrix<T> got(L, d);
        UQKVCache<T> cache = UQKVCache<T>::empty(d, cfg.kind);
        if (split >= 1) {
          PrefillResult<T> pre = prefill(from_x.prefix(split), cfg.kind, bc);
          got.set_block(0, 0, pre.output);
          cache = std::move(pre.cache);
        }
        for (std::size_t t = split; t < L; ++t) {
          got.set_block(t, 0, decode_step(x.row(t), cache, params));
        }
        err = max_abs_diff(expected, got);
        err = std::max(err, max_abs_diff(cache.u, lookahead_keys_direct(
                                                      from_x, L, cfg.kind)));
      });
      r.max_abs_err = err;
      r.max_rel_err = err;
      r.flops = m.flops;
      r.wall_ms = m.wall_ms;
      r.pass = r.max_abs_err <= cfg.tol.forward;
      reports.push_back(r);
    }

    {  // windowed variant with a window covering the whole sequence == full
      Report r = base_report("forward-swl-wide-vs-castle", seed);
      r.kind = detail::wide_window_kind(L);
      Matrix<T> a, b;
      const Measured m = measure([&] {
        a = parallel_forward(proj, MaskKind::castle());
        b = parallel_forward(proj, detail::wide_window_kind(L));
      });
      r.max_abs_err = max_abs_diff(a, b);
      r.max_rel_err = max_rel_diff(a, b);
      r.flops = m.flops;
      r.wall_ms = m.wall_ms;
      r.pass = r.max_abs_err == 0.0;  // identical arithmetic, bitwise equal
      reports.push_back(r);
    }

    {  // one-shot lookahead keys vs one-token-at-a-time recursion
      Report r = base_report("lookahead-direct-vs-recursive", seed);
      double err = 0;
      const Measured m = measure([&] {
        UQKVCache<T> cache = UQKVCache<T>::empty(d, cfg.kind);
        for (std::size_t t = 1; t <= L; ++t) {
          update_u_recursive(cache, proj.lookahead_q.row(t - 1),
                             proj.lookahead_k.row(t - 1),
                             proj.lookahead_v.row(t - 1));
          err = std::max(err, max_abs_diff(
                                  cache.u, lookahead_keys_direct(proj, t, cfg.kind)));
        }
      });
      r.max_abs_err = err;
      r.max_rel_err = err;
      r.flops = m.flops;
      r.wall_ms = m.wall_ms;
      r.pass = r.max_abs_err <= cfg.tol.forward;
      reports.push_back(r);
    }

    {  // tiled backward vs dense reference backward
      Report r = base_report("grad-blockwise-vs-dense", seed);
      Rng grng(seed + 0x51u);
      const Matrix<T> upstream = grng.normal_matrix<T>(L, d);
      Grads<T> ga, gb;
      const Measured m = measure([&] {
        ga = analytic_grads(proj, cfg.kind, BlockConfig{cfg.block_size}, upstream);
        gb = parallel_backward_reference(proj, cfg.kind, upstream);
      });
      r.max_abs_err = grads_max_abs_diff(ga, gb);
      r.max_rel_err = grads_max_rel_diff(ga, gb);
      r.flops = m.flops;
      r.wall_ms = m.wall_ms;
      r.pass = r.max_abs_err <= cfg.tol.grad_dense;
      reports.push_back(r);
    }

    {  // multi-head layer: slowest and fastest engines agree
      Report r = base_report("multihead-recurrent-vs-blockwise", seed);
      Rng mrng(seed + 0xabcdu);
      const MultiHeadParams<T> mh =
          make_random_mh_params<T>(mrng, cfg.heads, hidden, d);
      const Matrix<T> x = make_random_input<T>(mrng, L, hidden);
      Matrix<T> a, b;
      const Measured m = measure([&] {
        a = multihead_forward(x, mh, cfg.kind, Engine::kRecurrent);
        b = multihead_forward(x, mh, cfg.kind, Engine::kBlockwise,
                              BlockConfig{cfg.block_size});
      });
      r.max_abs_err = max_abs_diff(a, b);
      r.max_rel_err = max_rel_diff(a, b);
      r.flops = m.flops;
      r.wall_ms = m.wall_ms;
      r.pass = r.max_abs_err <= cfg.tol.forward;
      reports.push_back(r);
    }
  }
  return reports;
}

// Gradient checks only: tiled backward vs the dense reference and vs central
// finite differences of the same loss.
inline std::vector<Report> run_gradcheck(const SuiteConfig& cfg) {
  cfg.validate();
  if (cfg.precision != Precision::kF64) {
    throw std::invalid_argument("run_gradcheck: gradients are defined in f64 only");
  }
  using T = double;
  const std::size_t L = cfg.seq_len;
  const std::size_t d = cfg.head_dim;
  std::vector<Report> reports;
  for (std::size_t i = 0; i < cfg.num_seeds; ++i) {
    const std::uint64_t seed = cfg.seed + i;
    Rng rng(seed);
    const ProjectedSeq<T> proj = make_random_proj<T>(rng, L, d);
    const Matrix<T> upstream = rng.normal_matrix<T>(L, d);
    const BlockConfig bc{cfg.block_size};

    Grads<T> analytic;
    {
      Report r;
      r.test = "grad-blockwise-vs-dense";
      r.seq_len = L;
      r.head_dim = d;
      r.heads = cfg.heads;
      r.block_size = cfg.block_size;
      r.kind = cfg.kind;
      r.seed = seed;
      Grads<T> dense;
      const Measured m = measure([&] {
        analytic = analytic_grads(proj, cfg.kind, bc, upstream);
        dense = parallel_backward_reference(proj, cfg.kind, upstream);
      });
      r.max_abs_err = grads_max_abs_diff(analytic, dense);
      r.max_rel_err = grads_max_rel_diff(analytic, dense);
      r.flops = m.flops;
      r.wall_ms = m.wall_ms;
      r.pass = r.max_abs_err <= cfg.tol.grad_dense;
      reports.push_back(r);
    }
    {
      Report r;
      r.test = "grad-blockwise-vs-fd";
      r.seq_len = L;
      r.head_dim = d;
      r.heads = cfg.heads;
      r.block_size = cfg.block_size;
      r.kind = cfg.kind;
      r.seed = seed;
      Grads<T> fd;
      const Measured m = measure([&] { fd = fd_grads(proj, cfg.kind, bc, upstream); });
      r.max_abs_err = grads_max_abs_diff(analytic, fd);
      r.max_rel_err = grads_max_rel_diff(analytic, fd);
      r.flops = m.flops;
      r.wall_ms = m.wall_ms;
      r.pass = r.max_rel_err <= cfg.tol.grad_fd;
      reports.push_back(r);
    }
  }
  return reports;
}

// ---- bench ------------------------------------------------------------------

// One bench measurement. Rows for engine "decode-step" report a single
// autoregressive step, with seq_len holding the step index t; every row
// carries the standard causal attention forward at the same length as a
// baseline.
struct BenchRow {
  std::string engine;
  std::size_t seq_len = 0;
  std::size_t head_dim = 0;
  std::size_t block_size = 0;
  std::uint64_t flops = 0;
  double wall_ms = 0;
  std::uint64_t baseline_flops = 0;
  double baseline_wall_ms = 0;
};

inline std::string bench_csv_header() {
  return "engine,L,d,B,flops,wall_ms,baseline_flops,baseline_wall_ms";
}

inline std::string bench_csv_line(const BenchRow& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << r.engine << ',' << r.seq_len << ',' << r.head_dim << ',' << r.block_size
     << ',' << r.flops << ',' << r.wall_ms << ',' << r.baseline_flops << ','
     << r.baseline_wall_ms;
  return os.str();
}

inline nlohmann::ordered_json bench_row_json(const BenchRow& r) {
  nlohmann::ordered_json j;
  j["engine"] = r.engine;
  j["L"] = r.seq_len;
  j["d"] = r.head_dim;
  j["B"] = r.block_size;
  j["flops"] = r.flops;
  j["wall_ms"] = r.wall_ms;
  j["baseline_flops"] = r.baseline_flops;
  j["baseline_wall_ms"] = r.baseline_wall_ms;
  return j;
}

namespace detail {

template <typename T>
std::vector<BenchRow> run_bench_typed(const SuiteConfig& cfg,
                                      const std::vector<std::size_t>& seq_lens) {
  const std::size_t d = cfg.head_dim;
  const std::size_t hidden = 4 * d;
  std::vector<BenchRow> rows;
  const auto wants = [&](const std::string& engine) {
    return std::find(cfg.engines.begin(), cfg.engines.end(), engine) !=
           cfg.engines.end();
  };

  for (const std::size_t L : seq_lens) {
    Rng rng(cfg.seed ^ (0x5eedULL + L));
    const ProjectedSeq<T> proj = make_random_proj<T>(rng, L, d);
    const Measured base = measure([&] {
      standard_causal_forward(proj.causal_q, proj.causal_k, proj.causal_v);
    });

    const auto push = [&](const std::string& engine, const Measured& m,
                          std::size_t seq, std::size_t block) {
      BenchRow row;
      row.engine = engine;
      row.seq_len = seq;
      row.head_dim = d;
      row.block_size = block;
      row.flops = m.flops;
      row.wall_ms = m.wall_ms;
      row.baseline_flops = base.flops;
      row.baseline_wall_ms = base.wall_ms;
      rows.push_back(row);
    };

    if (wants("blockwise")) {
      push("blockwise",
           measure([&] { forward_blockwise(proj, cfg.kind, BlockConfig{cfg.block_size}); }),
           L, cfg.block_size);
    }
    if (wants("parallel")) {
      push("parallel", measure([&] { parallel_forward(proj, cfg.kind); }), L, 0);
    }
    if (wants("recurrent")) {
      push("recurrent", measure([&] { recurrent_full(proj, cfg.kind); }), L, 0);
    }
    if (wants("standard")) {
      push("standard", base, L, 0);
    }
  }

  if (wants("decode") && !seq_lens.empty()) {
    const std::size_t L = *std::max_element(seq_lens.begin(), seq_lens.end());
    Rng rng(cfg.seed ^ 0xdecdeULL);
    const HeadParams<T> params = make_random_head_params<T>(rng, hidden, d);
    const Matrix<T> x = make_random_input<T>(rng, L, hidden);
    UQKVCache<T> cache = UQKVCache<T>::empty(d, cfg.kind);
    for (std::size_t t = 0; t < L; ++t) {
      const Measured m = measure([&] { decode_step(x.row(t), cache, params); });
      BenchRow row;
      row.engine = "decode-step";
      row.seq_len = t + 1;
      row.head_dim = d;
      row.block_size = 0;
      row.flops = m.flops;
      row.wall_ms = m.wall_ms;
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace detail

inline std::vector<BenchRow> run_bench(const SuiteConfig& cfg,
                                       const std::vector<std::size_t>& seq_lens) {
  cfg.validate();
  if (cfg.precision == Precision::kF32) {
    return detail::run_bench_typed<float>(cfg, seq_lens);
  }
  return detail::run_bench_typed<double>(cfg, seq_lens);
}

// Least-squares fit y ~ a + b x; returns the coefficient of determination.
inline double linear_fit_r2(const std::vector<double>& xs,
                            const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 3) {
    throw std::invalid_argument("linear_fit_r2: need >= 3 samples");
  }
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  const double denom = n * sxx - sx * sx;
  if (denom == 0) throw std::invalid_argument("linear_fit_r2: degenerate xs");
  const double slope = (n * sxy - sx * sy) / denom;
  const double intercept = (sy - slope * sx) / n;
  double ss_res = 0, ss_tot = 0;
  const double mean_y = sy / n;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double fit = intercept + slope * xs[i];
    ss_res += (ys[i] - fit) * (ys[i] - fit);
    ss_tot += (ys[i] - mean_y) * (ys[i] - mean_y);
  }
  if (ss_tot == 0) return 1.0;
  return 1.0 - ss_res / ss_tot;
}

// Multiply-adds of one tiled forward at the given size.
inline std::uint64_t blockwise_forward_flops(std::size_t seq_len, std::size_t head_dim,
                                             std::size_t block_size,
                                             const MaskKind& kind,
                                             std::uint64_t seed) {
  Rng rng(seed);
  const ProjectedSeq<double> proj = make_random_proj<double>(rng, seq_len, head_dim);
  const Measured m =
      measure([&] { forward_blockwise(proj, kind, BlockConfig{block_size}); });
  return m.flops;
}

// Per-step decode multiply-adds for steps t = 1..seq_len.
inline std::vector<std::uint64_t> decode_step_flop_series(std::size_t seq_len,
                                                          std::size_t head_dim,
                                                          const MaskKind& kind,
                                                          std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t hidden = 4 * head_dim;
  const HeadParams<double> params =
      make_random_head_params<double>(rng, hidden, head_dim);
  const Matrix<double> x = make_random_input<double>(rng, seq_len, hidden);
  UQKVCache<double> cache = UQKVCache<double>::empty(head_dim, kind);
  std::vector<std::uint64_t> series;
  series.reserve(seq_len);
  for (std::size_t t = 0; t < seq_len; ++t) {
    const Measured m = measure([&] { decode_step(x.row(t), cache, params); });
    series.push_back(m.flops);
  }
  return series;
}

}  // namespace castle
