// ccd: command-line front end for the pseudo-labeling and training pipeline.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ccd/error.hpp"
#include "ccd/pipeline.hpp"
#include "ccd/view_provider.hpp"
#include "json.hpp"

namespace {

ccd::PipelineConfig config_or_default(const std::string& path) {
  if (path.empty()) return ccd::config_from_json(nlohmann::json::object(), ".");
  return ccd::load_config(path);
}

std::vector<nlohmann::json> parse_values(const std::string& list) {
  std::vector<nlohmann::json> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t comma = list.find(',', start);
    const std::string item = list.substr(start, comma - start);
    try {
      out.push_back(nlohmann::json::parse(item));
    } catch (const nlohmann::json::exception&) {
      out.emplace_back(item);
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ccd: debiased zero-shot pseudo-labels and classifier training"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", config_path, "pipeline config (JSON)");
    if (config_required) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output / run directory")->required();
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic world and its config.json");
  add_common(synth, false);
  auto* label_init = app.add_subcommand("label-init", "initial pseudo-labels, bias, calibration");
  add_common(label_init, true);
  auto* warmup = app.add_subcommand("warmup", "warm-up training on initial labels");
  add_common(warmup, true);
  auto* update = app.add_subcommand("update-labels", "local views, aggregation and fusion");
  add_common(update, true);
  auto* train = app.add_subcommand("train", "main training phase");
  add_common(train, true);
  bool full = false;
  train->add_flag("--full", full, "run label-init, warm-up and update-labels first");
  auto* eval = app.add_subcommand("eval", "mAP of the trained head on the eval manifest");
  add_common(eval, true);
  std::string predictor = "head";
  eval->add_option("--predictor", predictor, "head or gt (ground-truth oracle)")
      ->check(CLI::IsMember({"head", "gt"}));
  auto* report = app.add_subcommand("report", "markdown summary of a run directory");
  add_common(report, true);
  auto* sweep = app.add_subcommand("sweep", "train and evaluate over a parameter grid");
  add_common(sweep, true);
  std::string sweep_param, sweep_values;
  sweep->add_option("--param", sweep_param, "dotted config key, e.g. fusion.alpha");
  sweep->add_option("--values", sweep_values, "comma-separated values");

  auto* serve = app.add_subcommand("serve-synth", "serve a synthetic world over stdin/stdout");
  std::string world_path;
  serve->add_option("--world", world_path, "world.json written by synth")
      ->required()
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ccd::ErrorFamily::kConfig);
  }

  try {
    if (serve->parsed()) {
      const ccd::SyntheticWorld world = ccd::load_world(world_path);
      ccd::FdChannel channel(0, 1);
      ccd::serve_synthetic(channel, world);
      return 0;
    }

    ccd::PipelineConfig cfg = config_or_default(config_path);
    if (synth->parsed()) {
      const auto files = ccd::cmd_synth(cfg, out_dir);
      std::cout << "wrote " << files.train_manifest.string() << ", "
                << files.test_manifest.string() << " and " << out_dir << "/config.json\n";
    } else if (label_init->parsed()) {
      ccd::cmd_label_init(cfg, out_dir);
    } else if (warmup->parsed()) {
      ccd::cmd_warmup(cfg, out_dir);
    } else if (update->parsed()) {
      ccd::cmd_update_labels(cfg, out_dir);
    } else if (train->parsed()) {
      if (full) {
        ccd::cmd_train_full(cfg, out_dir);
      } else {
        ccd::cmd_train_main(cfg, out_dir);
      }
    } else if (eval->parsed()) {
      const auto r = ccd::cmd_eval(
          cfg, out_dir, predictor == "gt" ? ccd::Predictor::kGroundTruth : ccd::Predictor::kHead);
      std::cout << "mAP " << r.map << "\n";
    } else if (report->parsed()) {
      ccd::cmd_report(cfg, out_dir);
    } else if (sweep->parsed()) {
      if (!sweep_param.empty()) {
        nlohmann::json doc = cfg.to_json();
        doc["sweep"] = {{"parameter", sweep_param}, {"values", parse_values(sweep_values)}};
        cfg = ccd::config_from_json(doc, cfg.base_dir);
      }
      std::cout << ccd::cmd_sweep(cfg, out_dir);
    }
  } catch (const ccd::Error& e) {
    std::cerr << "ccd: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "ccd: internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
