#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wkrige/app.hpp"
#include "wkrige/error.hpp"
#include "wkrige/io.hpp"
#include "wkrige/parallel.hpp"

namespace {

using namespace wkrige;

int report_error(const char* kind, const std::string& message, const std::vector<std::string>& details, int code) {
  io::json doc = {{"error", kind}, {"message", message}, {"exit_code", code}};
  if (!details.empty()) doc["details"] = details;
  std::cerr << doc.dump() << '\n';
  return code;
}

std::vector<Smoothness> parse_nu_set(const std::string& text) {
  std::vector<Smoothness> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_smoothness(item));
  }
  if (out.empty()) throw ValidationError("nu set is empty");
  return out;
}

std::size_t resolve_threads(std::optional<std::size_t> flag) {
  const std::size_t t = flag ? *flag : threads_from_environment();
  if (t == 0) throw ValidationError("threads must be positive");
  return t;
}

struct FitArgs {
  std::string method = "cv";
  std::string nu_set = "1/2,3/2,5/2";
  std::string ls_nu = "3/2";
  std::size_t ls_grid_size = 100;
  std::size_t bins = 15;
  double bin_fraction = 0.5;
  bool weight_by_pairs = false;
  bool no_scale_coords = false;
  std::optional<std::size_t> threads;

  void attach(CLI::App* cmd, bool with_method) {
    if (with_method) cmd->add_option("--method", method, "cv or variogram-ls")->check(CLI::IsMember({"cv", "variogram-ls"}));
    cmd->add_option("--nu-set", nu_set, "comma-separated smoothness values for cross-validation");
    cmd->add_option("--nu", ls_nu, "smoothness held fixed by the variogram fit");
    cmd->add_option("--ls-grid-size", ls_grid_size, "number of length-scale candidates")->check(CLI::PositiveNumber);
    cmd->add_option("--bins", bins, "number of variogram bins")->check(CLI::PositiveNumber);
    cmd->add_option("--bin-fraction", bin_fraction, "bins cover this fraction of the largest site separation");
    cmd->add_flag("--weight-by-pairs", weight_by_pairs, "weight the variogram fit by pair counts");
    cmd->add_flag("--no-scale-coords", no_scale_coords, "keep raw coordinates instead of min-max scaling");
    cmd->add_option("--threads", threads, "worker threads (default: WKRIGE_THREADS or 1)");
  }

  [[nodiscard]] app::FitOptions options() const {
    app::FitOptions o;
    o.method = app::parse_fit_method(method);
    o.nu_set = parse_nu_set(nu_set);
    o.ls_nu = parse_smoothness(ls_nu);
    o.ls_grid_size = ls_grid_size;
    o.bins = bins;
    o.bin_fraction = bin_fraction;
    o.weight_by_pairs = weight_by_pairs;
    o.scale_coords = !no_scale_coords;
    o.threads = resolve_threads(threads);
    return o;
  }
};

std::string metrics_line(const app::Metrics& m) {
  io::Table t({"rmse_mean", "rmse_q95", "rmse_w", "count"});
  t.add_row(m.rmse_mean, m.rmse_q95, m.rmse_w, m.count);
  return t.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Ordinary Kriging of probability measures in the 2-Wasserstein space"};
  cli.require_subcommand(1);

  // toy-gen
  std::size_t toy_n = 50;
  std::uint64_t toy_seed = 0;
  std::size_t toy_m = QuantileGrid::default_size;
  std::string toy_out;
  auto* toy = cli.add_subcommand("toy-gen", "sample the Gaussian toy field on [0,1] x (0,2]");
  toy->add_option("-n,--n", toy_n, "number of observations");
  toy->add_option("--seed", toy_seed, "random seed");
  toy->add_option("-M,--grid-size", toy_m, "quantile grid size");
  toy->add_option("-o,--out", toy_out, "output dataset file")->required();

  // fit
  std::string fit_data, fit_out, fit_report;
  FitArgs fit_args;
  auto* fit = cli.add_subcommand("fit", "select Matern parameters and write a model file");
  fit->add_option("-d,--dataset", fit_data, "dataset file")->required();
  fit->add_option("-o,--out", fit_out, "output model file")->required();
  fit->add_option("--report", fit_report, "report table (cv surface or empirical variogram)");
  fit_args.attach(fit, true);

  // predict
  std::string pred_model, pred_targets, pred_out, pred_mode = "sorted";
  auto* predict = cli.add_subcommand("predict", "predict quantile curves at target locations");
  predict->add_option("-m,--model", pred_model, "model file")->required();
  predict->add_option("-t,--targets", pred_targets, "targets file ({\"targets\": [[...]]} or a dataset)")->required();
  predict->add_option("-o,--out", pred_out, "output predictions file")->required();
  predict->add_option("--mode", pred_mode, "sorted or constrained")->check(CLI::IsMember({"sorted", "constrained"}));

  // eval
  std::string eval_model, eval_test, eval_data, eval_out, eval_mode = "sorted";
  std::optional<double> eval_split;
  std::size_t eval_repeats = 100;
  std::uint64_t eval_seed = 0;
  FitArgs eval_fit;
  auto* eval = cli.add_subcommand("eval", "score a model on held-out data, or run repeated random splits");
  eval->add_option("-m,--model", eval_model, "model file");
  eval->add_option("--test", eval_test, "held-out dataset file");
  eval->add_option("-d,--dataset", eval_data, "dataset file for split evaluation");
  eval->add_option("--split", eval_split, "training fraction for split evaluation");
  eval->add_option("--repeats", eval_repeats, "number of random splits")->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_seed, "split seed");
  eval->add_option("--mode", eval_mode, "sorted or constrained")->check(CLI::IsMember({"sorted", "constrained"}));
  eval->add_option("-o,--out", eval_out, "output table");
  eval_fit.attach(eval, false);

  // loo-bench
  std::string bench_data, bench_out, bench_pairs;
  std::vector<std::size_t> bench_sizes{50, 100, 200, 400};
  std::size_t bench_grid = 100;
  std::uint64_t bench_seed = 0;
  bool bench_no_scale = false;
  auto* bench = cli.add_subcommand("loo-bench", "time naive against virtual leave-one-out");
  bench->add_option("-d,--dataset", bench_data, "dataset file (toy field generated when absent or too small)");
  bench->add_option("--sizes", bench_sizes, "observation counts")->delimiter(',');
  bench->add_option("--ls-grid-size", bench_grid, "number of length-scale candidates")->check(CLI::PositiveNumber);
  bench->add_option("--seed", bench_seed, "toy field seed");
  bench->add_flag("--no-scale-coords", bench_no_scale, "keep raw coordinates");
  bench->add_option("-o,--out", bench_out, "timing table");
  bench->add_option("--pairs-out", bench_pairs, "per-candidate naive/virtual MSE table");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return cli.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return cli.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), {}, 1);
  }

  try {
    if (*toy) {
      io::write_json_file(toy_out, io::dataset_to_json(app::make_toy_dataset(toy_n, toy_seed, toy_m)));
    } else if (*fit) {
      const app::FitOptions options = fit_args.options();
      const io::Dataset data = io::load_dataset(fit_data);
      const app::FitOutcome outcome = app::fit_dataset(data, options);
      io::write_json_file(fit_out, io::model_to_json(outcome.model));
      if (!fit_report.empty()) io::write_text_file(fit_report, outcome.report.str());
      std::cout << "selected " << outcome.model.params.describe() << '\n';
    } else if (*predict) {
      const auto mode = app::parse_mode(pred_mode);
      const io::Model model = io::load_model(pred_model);
      const auto targets = io::parse_targets(io::read_json_file(pred_targets), model.dim());
      const auto preds = app::predict_targets(model, targets, mode);
      io::write_json_file(pred_out, app::predictions_to_json(preds, model.grid(), mode));
      std::size_t failed = 0;
      for (const auto& p : preds) failed += p.curve ? 0 : 1;
      if (failed > 0)
        return report_error("numerical", std::to_string(failed) + " target(s) failed; see error entries in " + pred_out, {}, 2);
    } else if (*eval) {
      if (eval_split) {
        if (eval_data.empty()) throw ValidationError("--split needs --dataset");
        app::SplitOptions options;
        options.train_fraction = *eval_split;
        options.repeats = eval_repeats;
        options.seed = eval_seed;
        options.fit = eval_fit.options();
        const auto results = app::evaluate_splits(io::load_dataset(eval_data), options);
        io::Table t({"split", "model", "rmse_mean", "rmse_q95", "rmse_w", "status"});
        t.add_comment("q95 taken at the grid node nearest 0.95");
        for (const auto& r : results) {
          if (r.metrics)
            t.add_row(r.split, r.variant, r.metrics->rmse_mean, r.metrics->rmse_q95, r.metrics->rmse_w, "ok");
          else
            t.add_row(r.split, r.variant, "nan", "nan", "nan", r.error);
        }
        if (eval_out.empty())
          std::cout << t.str();
        else
          io::write_text_file(eval_out, t.str());
      } else {
        if (eval_model.empty() || eval_test.empty()) throw ValidationError("eval needs --model and --test, or --dataset with --split");
        const io::Model model = io::load_model(eval_model);
        const app::Metrics m = app::evaluate_model(model, io::load_dataset(eval_test), app::parse_mode(eval_mode));
        const std::string text = metrics_line(m);
        std::cout << text;
        if (!eval_out.empty()) io::write_text_file(eval_out, text);
      }
    } else if (*bench) {
      app::BenchOptions options;
      options.sizes = bench_sizes;
      options.ls_grid_size = bench_grid;
      options.seed = bench_seed;
      options.scale_coords = !bench_no_scale;
      std::optional<io::Dataset> data;
      if (!bench_data.empty()) data = io::load_dataset(bench_data);
      const auto rows = app::run_loo_bench(data ? &*data : nullptr, options);
      const std::string text = app::bench_table(rows).str();
      if (bench_out.empty())
        std::cout << text;
      else
        io::write_text_file(bench_out, text);
      if (!bench_pairs.empty()) io::write_text_file(bench_pairs, app::bench_pairs_table(rows).str());
    }
  } catch (const ValidationError& e) {
    return report_error("validation", e.what(), e.details(), 1);
  } catch (const NumericalError& e) {
    return report_error("numerical", e.what(), {}, 2);
  } catch (const std::exception& e) {
    return report_error("io", e.what(), {}, 1);
  }
  return 0;
}
