#include "retiscreen/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "commands.hpp"
#include "retiscreen/file_util.hpp"

namespace retiscreen::cli {

void Context::log(const std::string& line) const {
  if (!quiet) err << line << '\n';
}

nlohmann::json Context::provenance(std::uint64_t seed) const {
  return {{"tool", "retiscreen"},
          {"tool_version", RETISCREEN_VERSION},
          {"format_version", 1},
          {"command", command},
          {"seed", seed},
          {"config", resolved}};
}

namespace {

/// Config keys become "--key value" arguments unless the key was given as a flag.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t k = 0; k < args.size(); ++k) {
    if (args[k] == "--config") {
      if (k + 1 == args.size()) throw CLI::ArgumentMismatch("--config needs a file");
      path = args[k + 1];
    } else if (args[k].rfind("--config=", 0) == 0) {
      path = args[k].substr(9);
    }
  }
  if (path.empty()) return args;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw CLI::ConversionError("config file " + path + " is not valid JSON: " + e.what());
  } catch (const std::exception& e) {
    throw CLI::FileError(e.what());
  }
  if (!j.is_object()) throw CLI::ConversionError("config file " + path + " must hold a JSON object");
  auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  auto scalar = [](const std::string& key, const nlohmann::json& v) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) return v.dump();
    throw CLI::ConversionError("config key '" + key + "' must be a string, number, boolean or array");
  };
  auto out = args;
  for (const auto& [key, value] : j.items()) {
    const auto flag = "--" + key;
    if (key == "config" || given(flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
      continue;
    }
    out.push_back(flag);
    if (value.is_array()) {
      if (value.empty()) throw CLI::ConversionError("config key '" + key + "' is an empty array");
      for (const auto& v : value) out.push_back(scalar(key, v));
    } else {
      out.push_back(scalar(key, value));
    }
  }
  return out;
}

nlohmann::json resolved_options(const CLI::App* app) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : app->get_options({})) {
    if (opt->get_lnames().empty()) continue;
    const auto name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    if (opt->count() > 0) {
      const auto& r = opt->results();
      j[name] = opt->get_type_size_max() == 0 ? nlohmann::json(true)
                : r.size() == 1             ? nlohmann::json(r.front())
                                            : nlohmann::json(r);
    } else if (!opt->get_default_str().empty()) {
      j[name] = opt->get_default_str();
    } else {
      j[name] = nullptr;
    }
  }
  return j;
}

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& description) {
  auto* sub = app.add_subcommand(name, description);
  sub->add_option("--config", "JSON file of option values; command-line flags take precedence")
      ->check(CLI::ExistingFile);
  return sub;
}

}  // namespace

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diabetic-retinopathy screening toolkit: synthetic data, training, ensembling, inference, statistics",
               "retiscreen"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress logging");

  SynthOptions synth;
  auto* s = add_command(app, "synth", "Generate a synthetic fundus dataset");
  s->add_option("--n-patients", synth.n_patients, "Number of patients")->required()->check(CLI::PositiveNumber);
  s->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--image-size", synth.image_size, "Raw image side in pixels")->capture_default_str()->check(CLI::Range(16, 4096));
  s->add_option("--images-per-eye", synth.images_per_eye, "Photographs per eye")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--grade-distribution", synth.grade_distribution, "Five grade probabilities (none..PDR)")
      ->capture_default_str()->expected(5)->delimiter(',');
  s->add_option("--illumination", synth.illumination, "Illumination ramp amplitude")->capture_default_str()->check(CLI::Range(0.0, 0.99));

  TrainOptions train;
  auto* t = add_command(app, "train", "Train one micro-CNN");
  t->add_option("--task", train.task, "laterality | referable | severity")
      ->required()->check(CLI::IsMember({"laterality", "referable", "severity"}));
  t->add_option("--manifest", train.manifest, "Manifest (JSON Lines)")->required()->check(CLI::ExistingFile);
  t->add_option("--split", train.split, "Split file; created from --split-fractions if missing")->required();
  t->add_option("--split-fractions", train.split_fractions, "train,validation,test patient fractions")
      ->capture_default_str()->expected(2, 3)->delimiter(',');
  t->add_option("--out", train.out, "Checkpoint path")->required();
  t->add_option("--input-size", train.input_size, "Network input side")->capture_default_str()->check(CLI::PositiveNumber);
  t->add_option("--stages", train.stages, "Conv stages")->capture_default_str()->check(CLI::PositiveNumber);
  t->add_option("--base-channels", train.base_channels, "Channels of the first stage")->capture_default_str()->check(CLI::PositiveNumber);
  t->add_option("--lr", train.lr, "Initial learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  t->add_option("--epochs", train.epochs, "Maximum epochs")->capture_default_str()->check(CLI::PositiveNumber);
  t->add_option("--patience", train.patience, "Non-improving epochs tolerated")->capture_default_str()->check(CLI::NonNegativeNumber);
  t->add_option("--batch-size", train.batch_size, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
  t->add_option("--class-weight-power", train.class_weight_power, "Exponent of inverse-frequency class weights")
      ->capture_default_str()->check(CLI::Range(0.0, 1.0));
  t->add_flag("--no-augment", train.no_augment, "Disable random horizontal flips");
  t->add_option("--seed", train.seed, "Random seed")->capture_default_str();

  EnsembleOptions ens;
  auto* e = add_command(app, "ensemble", "Greedy ensemble selection over candidate checkpoints");
  e->add_option("--task", ens.task, "referable | severity")->required()->check(CLI::IsMember({"referable", "severity"}));
  e->add_option("--manifest", ens.manifest, "Manifest (JSON Lines)")->required()->check(CLI::ExistingFile);
  e->add_option("--split", ens.split, "Split file")->required()->check(CLI::ExistingFile);
  e->add_option("--candidates", ens.candidates, "Candidate checkpoints")->required()->check(CLI::ExistingFile);
  e->add_option("--out", ens.out, "Ensemble manifest path")->required();
  e->add_option("--epsilon", ens.epsilon, "Minimum validation-AUC gain to add a member")->capture_default_str()->check(CLI::NonNegativeNumber);
  e->add_option("--specificity", ens.specificity, "Validation specificity for the operating threshold")
      ->capture_default_str()->check(CLI::Range(0.0, 1.0));

  InferOptions inf;
  auto* i = add_command(app, "infer", "Diagnose exams: laterality, eye grouping, scores, heatmaps");
  auto* man = i->add_option("--manifest", inf.manifest, "Manifest of exams")->check(CLI::ExistingFile);
  auto* dir = i->add_option("--exam-dir", inf.exam_dir, "Directory of images forming one exam")->check(CLI::ExistingDirectory);
  man->excludes(dir);
  i->add_option("--split", inf.split, "Restrict to one part of this split file")->check(CLI::ExistingFile);
  i->add_option("--part", inf.part, "train | validation | test")->capture_default_str()
      ->check(CLI::IsMember({"train", "validation", "test"}));
  i->add_option("--laterality", inf.laterality, "Laterality checkpoint")->required()->check(CLI::ExistingFile);
  i->add_option("--referable", inf.referable, "Referable ensemble manifest")->required()->check(CLI::ExistingFile);
  i->add_option("--severity", inf.severity, "Severity ensemble manifest")->check(CLI::ExistingFile);
  i->add_option("--threshold", inf.threshold, "Decision threshold (default: the ensemble's operating threshold)")
      ->check(CLI::Range(0.0, 1.0));
  i->add_option("--out", inf.out, "Output directory")->required();
  i->add_flag("--no-heatmaps", inf.no_heatmaps, "Skip heatmap computation");
  i->add_flag("--raw-maps", inf.raw_maps, "Also write 16-bit evidence maps");
  i->add_option("--overlay-threshold", inf.overlay_threshold, "Map level drawn in green")->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  i->add_option("--features", inf.features,
                "features.csv content: member probabilities or pooled activations of each patient's top image")
      ->capture_default_str()->check(CLI::IsMember({"probabilities", "penultimate"}));

  EvalOptions ev;
  auto* v = add_command(app, "eval", "ROC, AUC, DeLong CI and operating points of a prediction file");
  v->add_option("--pred", ev.pred, "Prediction CSV (unit_id plus score columns)")->required()->check(CLI::ExistingFile);
  v->add_option("--labels", ev.labels, "Manifest providing labels")->required()->check(CLI::ExistingFile);
  v->add_option("--label", ev.label, "referable | vision-threatening | ge1..ge4")->capture_default_str()
      ->check(CLI::IsMember({"referable", "vision-threatening", "ge1", "ge2", "ge3", "ge4"}));
  v->add_option("--column", ev.column, "Score column")->capture_default_str();
  v->add_flag("--delong", ev.delong, "Report the DeLong confidence interval");
  v->add_flag("--severity-suite", ev.severity_suite, "Four grade binarizations from columns ge1..ge4");
  v->add_option("--specificity", ev.specificity, "Operating point at this specificity")->check(CLI::Range(0.0, 1.0));
  v->add_option("--sensitivity", ev.sensitivity, "Operating point at this sensitivity")->check(CLI::Range(0.0, 1.0));
  v->add_option("--level", ev.level, "Confidence level")->capture_default_str()->check(CLI::Range(0.5, 0.999999));
  v->add_option("--out", ev.out, "Directory for roc.csv and report.json");

  CompareOptions cmp;
  auto* c = add_command(app, "compare", "Paired DeLong test of two prediction files");
  c->add_option("--pred-a", cmp.pred_a, "First prediction CSV")->required()->check(CLI::ExistingFile);
  c->add_option("--pred-b", cmp.pred_b, "Second prediction CSV")->required()->check(CLI::ExistingFile);
  c->add_option("--labels", cmp.labels, "Manifest providing labels")->required()->check(CLI::ExistingFile);
  c->add_option("--label", cmp.label, "referable | vision-threatening | ge1..ge4")->capture_default_str()
      ->check(CLI::IsMember({"referable", "vision-threatening", "ge1", "ge2", "ge3", "ge4"}));
  c->add_option("--column", cmp.column, "Score column")->capture_default_str();
  c->add_option("--out", cmp.out, "JSON result path");

  TsneOptions ts;
  auto* n = add_command(app, "tsne", "Two-dimensional t-SNE embedding of a feature file");
  n->add_option("--features", ts.features, "Feature CSV (unit_id, f0, f1, ...)")->required()->check(CLI::ExistingFile);
  n->add_option("--out", ts.out, "Embedding CSV")->required();
  n->add_option("--labels", ts.labels, "Manifest for the label column")->check(CLI::ExistingFile);
  n->add_option("--label", ts.label, "Label definition")->capture_default_str()
      ->check(CLI::IsMember({"referable", "vision-threatening", "ge1", "ge2", "ge3", "ge4"}));
  n->add_option("--perplexity", ts.perplexity, "Perplexity")->capture_default_str()->check(CLI::PositiveNumber);
  n->add_option("--iterations", ts.iterations, "Gradient iterations")->capture_default_str()->check(CLI::PositiveNumber);
  n->add_option("--seed", ts.seed, "Random seed")->capture_default_str();

  HeatmapOptions hm;
  auto* h = add_command(app, "heatmap", "Evidence overlay for one image");
  h->add_option("--image", hm.image, "PNG or PPM image")->required()->check(CLI::ExistingFile);
  auto* ck = h->add_option("--checkpoint", hm.checkpoint, "Single model checkpoint")->check(CLI::ExistingFile);
  auto* en = h->add_option("--ensemble", hm.ensemble, "Ensemble manifest")->check(CLI::ExistingFile);
  ck->excludes(en);
  h->add_option("--out", hm.out, "Overlay PNG path")->required();
  h->add_option("--raw-map", hm.raw_map, "Optional 16-bit evidence map PNG");
  h->add_option("--threshold", hm.threshold, "Map level drawn in green")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  h->add_option("--sigma", hm.sigma, "Smoothing in input pixels")->capture_default_str()->check(CLI::NonNegativeNumber);

  try {
    const auto expanded = expand_config({args.begin(), args.end()});
    app.parse(std::vector<std::string>(expanded.rbegin(), expanded.rend()));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    if (ex.get_exit_code() == 0) return kExitOk;
    err << "error: " << ex.what() << "\n\n";
    const auto chosen = app.get_subcommands();
    err << (chosen.empty() ? app.help() : chosen.front()->help());
    return kExitUsage;
  }

  CLI::App* chosen = app.get_subcommands().front();
  Context ctx{out, err, chosen->get_name(), resolved_options(chosen), quiet};
  ctx.log("retiscreen " + ctx.command + " " + ctx.resolved.dump());
  try {
    if (chosen == s) return run_synth(ctx, synth);
    if (chosen == t) return run_train(ctx, train);
    if (chosen == e) return run_ensemble(ctx, ens);
    if (chosen == i) {
      if (inf.manifest.empty() == inf.exam_dir.empty()) throw CLI::ValidationError("infer needs --manifest or --exam-dir");
      return run_infer(ctx, inf);
    }
    if (chosen == v) return run_eval(ctx, ev);
    if (chosen == c) return run_compare(ctx, cmp);
    if (chosen == n) return run_tsne(ctx, ts);
    if (chosen == h) {
      if (hm.checkpoint.empty() == hm.ensemble.empty())
        throw CLI::ValidationError("heatmap needs --checkpoint or --ensemble");
      return run_heatmap(ctx, hm);
    }
  } catch (const CLI::Error& ex) {
    err << "error: " << ex.what() << "\n\n" << chosen->help();
    return kExitUsage;
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n\n" << chosen->help();
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int k = 1; k < argc; ++k) args.emplace_back(argv[k]);
  return run(args, out, err);
}

}  // namespace retiscreen::cli
