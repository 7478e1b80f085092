// Command-line harness for the lookahead-gated attention library:
//   verify       cross-form equivalence suite (JSON lines by default)
//   gradcheck    tiled backward vs dense reference and finite differences
//   bench        counted multiply-adds and wall times per engine (CSV)
//   decode-demo  prefill + token-by-token decoding walkthrough
// Exit status is 0 only if every reported comparison passed.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "castle/castle.hpp"
#include "castle/verify.hpp"

namespace {

struct CliOptions {
  std::size_t seq_len = 16;
  std::size_t dim = 4;
  std::size_t heads = 2;
  std::size_t block_size = 4;
  std::string mode = "castle";
  std::size_t window = 4;
  std::uint64_t seed = 0;
  std::string precision = "f64";
  double tol_forward = 1e-10;
  double tol_blockwise = 1e-11;
  double tol_grad_dense = 1e-9;
  double tol_grad_fd = 1e-6;
  std::string out;  // "json" or "csv"; per-command default if empty
  std::string out_file;
  bool mutate_gradient = false;
};

// CLI::PositiveNumber parses through double and reports a floating-point
// range on failure; these flags are integer counts, so say so.
const CLI::Validator positive_int(
    [](std::string& s) -> std::string {
      std::uint64_t v = 0;
      auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || end != s.data() + s.size() || v == 0) {
        return "requires a positive integer (got '" + s + "')";
      }
      return {};
    },
    "POSITIVE_INT");

void add_common_options(CLI::App* cmd, CliOptions* opts) {
  cmd->add_option("--seq-len", opts->seq_len, "Sequence length L")
      ->check(positive_int);
  cmd->add_option("--dim", opts->dim, "Head dimension d")->check(positive_int);
  cmd->add_option("--heads", opts->heads, "Number of heads n")
      ->check(positive_int);
  cmd->add_option("--block-size", opts->block_size, "Tile size B")
      ->check(positive_int);
  cmd->add_option("--mode", opts->mode, "Lookahead variant")
      ->check(CLI::IsMember({"castle", "swl"}));
  cmd->add_option("--window", opts->window, "Lookahead window W (swl mode)")
      ->check(positive_int);
  cmd->add_option("--seed", opts->seed, "Base seed");
  cmd->add_option("--precision", opts->precision, "Arithmetic precision")
      ->check(CLI::IsMember({"f64", "f32"}));
  cmd->add_option("--tol-forward", opts->tol_forward,
                  "Forward agreement tolerance (absolute)");
  cmd->add_option("--tol-blockwise", opts->tol_blockwise,
                  "Tiled-vs-whole-sequence tolerance (absolute)");
  cmd->add_option("--tol-grad-dense", opts->tol_grad_dense,
                  "Tiled-vs-dense gradient tolerance (absolute)");
  cmd->add_option("--tol-grad-fd", opts->tol_grad_fd,
                  "Analytic-vs-finite-difference gradient tolerance (relative)");
  cmd->add_option("--out", opts->out, "Report format")
      ->check(CLI::IsMember({"json", "csv"}));
  cmd->add_option("--out-file", opts->out_file, "Write reports to this file");
}

castle::SuiteConfig to_suite_config(const CliOptions& opts) {
  castle::SuiteConfig cfg;
  cfg.seq_len = opts.seq_len;
  cfg.head_dim = opts.dim;
  cfg.heads = opts.heads;
  cfg.block_size = opts.block_size;
  cfg.kind = opts.mode == "swl" ? castle::MaskKind::castle_swl(opts.window)
                                : castle::MaskKind::castle();
  cfg.seed = opts.seed;
  cfg.precision =
      opts.precision == "f32" ? castle::Precision::kF32 : castle::Precision::kF64;
  cfg.tol.forward = opts.tol_forward;
  cfg.tol.blockwise = opts.tol_blockwise;
  cfg.tol.grad_dense = opts.tol_grad_dense;
  cfg.tol.grad_fd = opts.tol_grad_fd;
  return cfg;
}

// Output sink: --out-file if given, stdout otherwise.
class Sink {
 public:
  explicit Sink(const std::string& path) {
    if (!path.empty()) {
      file_.open(path);
      if (!file_) throw std::runtime_error("cannot open output file: " + path);
    }
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

int emit_reports(const std::vector<castle::Report>& reports,
                 const CliOptions& opts, const std::string& default_out) {
  const std::string format = opts.out.empty() ? default_out : opts.out;
  Sink sink(opts.out_file);
  if (format == "csv") sink.stream() << castle::report_csv_header() << '\n';
  for (const castle::Report& r : reports) {
    sink.stream() << (format == "csv" ? castle::report_csv_line(r)
                                      : castle::report_json_line(r))
                  << '\n';
  }
  return castle::all_pass(reports) ? 0 : 1;
}

bool require_f64(const CliOptions& opts, const char* what) {
  if (opts.precision != "f64") {
    std::cerr << what << " runs in f64 only; --precision f32 is bench-only\n";
    return false;
  }
  return true;
}

int run_verify(const CliOptions& opts) {
  if (!require_f64(opts, "verify")) return 2;
  castle::selftest::skew_lookahead_key_grad.store(opts.mutate_gradient);
  const std::vector<castle::Report> reports =
      castle::run_equivalence_suite(to_suite_config(opts));
  castle::selftest::skew_lookahead_key_grad.store(false);
  return emit_reports(reports, opts, "json");
}

int run_gradcheck_cmd(const CliOptions& opts) {
  if (!require_f64(opts, "gradcheck")) return 2;
  return emit_reports(castle::run_gradcheck(to_suite_config(opts)), opts, "json");
}

int run_bench_cmd(const CliOptions& opts) {
  const castle::SuiteConfig cfg = to_suite_config(opts);
  // The doubling pair {L, 2L} exposes the quadratic flop scaling directly;
  // decode rows cover steps t = 1..2L.
  const std::vector<castle::BenchRow> rows =
      castle::run_bench(cfg, {opts.seq_len, 2 * opts.seq_len});
  const std::string format = opts.out.empty() ? "csv" : opts.out;
  Sink sink(opts.out_file);
  if (format == "csv") sink.stream() << castle::bench_csv_header() << '\n';
  for (const castle::BenchRow& r : rows) {
    sink.stream() << (format == "csv" ? castle::bench_csv_line(r)
                                      : castle::bench_row_json(r).dump())
                  << '\n';
  }
  return 0;
}

int run_decode_demo(const CliOptions& opts) {
  if (!require_f64(opts, "decode-demo")) return 2;
  using castle::Matrix;
  const castle::SuiteConfig cfg = to_suite_config(opts);
  const std::size_t L = cfg.seq_len;
  const std::size_t d = cfg.head_dim;
  const std::size_t hidden = 4 * d;

  castle::Rng rng(cfg.seed);
  const castle::HeadParams<double> params =
      castle::make_random_head_params<double>(rng, hidden, d);
  const Matrix<double> x = castle::make_random_input<double>(rng, L, hidden);
  const castle::ProjectedSeq<double> proj = castle::project(x, params);
  const Matrix<double> expected = castle::recurrent_full(proj, cfg.kind);

  const std::size_t split = L / 2;
  double max_err = 0;
  std::uint64_t decode_flops = 0;
  double decode_ms = 0;
  auto cache = castle::UQKVCache<double>::empty(d, cfg.kind);
  Matrix<double> got(L, d);
  if (split >= 1) {
    auto pre = castle::prefill(proj.prefix(split), cfg.kind,
                               castle::BlockConfig{cfg.block_size});
    got.set_block(0, 0, pre.output);
    cache = std::move(pre.cache);
    std::cout << "prefill: tokens=" << split
              << " cache_numbers=" << cache.number_count() << " (4*t*d="
              << 4 * split * d << ")\n";
  }
  for (std::size_t t = split; t < L; ++t) {
    const auto m = castle::measure(
        [&] { got.set_block(t, 0, castle::decode_step(x.row(t), cache, params)); });
    const double err = castle::max_abs_diff(got.row(t), expected.row(t));
    max_err = std::max(max_err, err);
    decode_flops += m.flops;
    decode_ms += m.wall_ms;
    std::cout << "step t=" << t + 1 << " flops=" << m.flops
              << " cache_numbers=" << cache.number_count() << " (4*t*d="
              << 4 * (t + 1) * d << ") max|err|=" << err << '\n';
  }
  max_err = std::max(max_err, castle::max_abs_diff(got, expected));

  castle::Report r;
  r.test = "decode-demo-vs-recurrent";
  r.seq_len = L;
  r.head_dim = d;
  r.heads = cfg.heads;
  r.block_size = cfg.block_size;
  r.kind = cfg.kind;
  r.seed = cfg.seed;
  r.max_abs_err = max_err;
  r.max_rel_err = max_err;
  r.flops = decode_flops;
  r.wall_ms = decode_ms;
  r.pass = max_err <= cfg.tol.forward;
  return emit_reports({r}, opts, "json");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lookahead-gated attention: verification and bench harness"};
  app.require_subcommand(1);
  CliOptions opts;

  CLI::App* verify = app.add_subcommand(
      "verify", "Cross-form equivalence suite; exit 1 if any comparison fails");
  add_common_options(verify, &opts);
  verify->add_flag("--mutate-gradient", opts.mutate_gradient,
                   "Self-test: corrupt one backward-kernel term; the gradient "
                   "comparison must then fail");

  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "Tiled backward vs dense reference and finite differences");
  add_common_options(gradcheck, &opts);

  CLI::App* bench = app.add_subcommand(
      "bench", "Counted multiply-adds and wall times at {L, 2L} per engine");
  add_common_options(bench, &opts);

  CLI::App* demo = app.add_subcommand(
      "decode-demo", "Prefill then decode token by token, checked against the "
                     "token-by-token definition");
  add_common_options(demo, &opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // bad flags and malformed values are configuration errors
  }

  try {
    if (verify->parsed()) return run_verify(opts);
    if (gradcheck->parsed()) return run_gradcheck_cmd(opts);
    if (bench->parsed()) return run_bench_cmd(opts);
    if (demo->parsed()) return run_decode_demo(opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
