// End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "op_gradients.hpp"
#include "oracles.hpp"
#include "retiscreen/checkpoint.hpp"
#include "retiscreen/cli.hpp"
#include "retiscreen/data_model.hpp"
#include "retiscreen/ensembling.hpp"
#include "retiscreen/eval_stats.hpp"
#include "retiscreen/file_util.hpp"
#include "retiscreen/heatmap.hpp"
#include "retiscreen/image.hpp"
#include "retiscreen/inference_engine.hpp"
#include "retiscreen/micro_cnn.hpp"
#include "retiscreen/preprocessing.hpp"
#include "retiscreen/synthetic_fundus.hpp"
#include "retiscreen/training_mil.hpp"
#include "retiscreen/tsne.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace retiscreen;

namespace {

// ---- pinned tolerances and sizes ---------------------------------------------

constexpr int kGradSeeds = 24;
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 60;

constexpr int kAucSets = 200;
constexpr int kAucMinSize = 2;
constexpr int kAucMaxSize = 500;
constexpr double kAucTolerance = 1e-12;
constexpr double kAucSeconds = 10;

constexpr int kDelongTrials = 20;
constexpr int kDelongPerClass = 300;
constexpr int kBootstrapResamples = 2000;
constexpr double kDelongTolerance = 0.02;
constexpr double kDelongSeconds = 120;

constexpr int kPatients = 1500;
constexpr int kDatasetSeed = 7;
constexpr int kTestPatients = 300;
constexpr double kReferableAuc = 0.95;
constexpr double kOperatingSpecificity = 0.87;
constexpr double kReferableSensitivity = 0.95;
constexpr double kEndToEndSeconds = 30 * 60;

constexpr double kLateralityAccuracy = 0.99;
constexpr std::size_t kLateralityImages = 500;
constexpr double kLateralitySeconds = 10 * 60;

constexpr double kSeverityTolerance = 0.02;
constexpr double kSeverityFloor = 0.90;

constexpr int kMonotoneTransforms = 50;

constexpr int kPointingImages = 200;
constexpr double kPointingRadius = 5.0;
constexpr double kPointingHitRate = 0.80;

constexpr double kSilhouette = 0.5;
constexpr int kKlWindow = 100;
constexpr double kKlJitter = 1e-3;

constexpr double kLatencyMs = 2000.0;
constexpr int kLatencyMembers = 5;
constexpr int kLargestInput = 64;

// ---- helpers ----------------------------------------------------------------------

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

void cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  args.insert(args.begin(), "--quiet");
  std::string line;
  for (const auto& a : args) line += " " + a;
  std::cerr << "[acceptance] retiscreen" << line << "\n";
  const int code = cli::run(args, out, err);
  if (code != 0) throw std::runtime_error("retiscreen" + line + " exited " + std::to_string(code) + ": " + err.str());
  std::cerr << out.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).generic_string()] = slurp(e.path());
  return files;
}

// Eye-level labels and grades keyed like prediction unit ids.
struct EyeLabels {
  std::map<std::string, int> referable;
  std::map<std::string, int> grade;
};

EyeLabels eye_labels(const Manifest& m) {
  EyeLabels out;
  for (const auto& exam : m.exams)
    for (Side s : {Side::left, Side::right})
      if (const auto& g = exam.eye(s)) {
        out.referable[eye_id(exam, s)] = referable_label(*g) ? 1 : 0;
        out.grade[eye_id(exam, s)] = to_int(g->grade);
      }
  return out;
}

// Highest sensitivity among thresholds meeting the specificity floor, from the brute-force sweep.
double sweep_sensitivity_at(std::span<const double> scores, std::span<const int> labels, double specificity) {
  double best = 0.0;
  for (const auto& p : oracle::threshold_sweep(scores, labels))
    if (p.specificity >= specificity) best = std::max(best, p.sensitivity);
  return best;
}

// ---- the shared end-to-end pipeline -----------------------------------------------------

struct Candidate {
  std::string name;
  std::vector<std::string> flags;
};

const std::vector<Candidate> kReferableCandidates{
    {"ref_a", {"--seed", "1", "--input-size", "32", "--lr", "0.05"}},
    {"ref_b", {"--seed", "2", "--input-size", "48", "--lr", "0.03"}},
    {"ref_c", {"--seed", "3", "--input-size", "32", "--base-channels", "12", "--lr", "0.04"}},
    {"ref_d", {"--seed", "4", "--input-size", "64", "--lr", "0.02"}},
};
const std::vector<Candidate> kSeverityCandidates{
    {"sev_a", {"--seed", "1", "--input-size", "32", "--lr", "0.05"}},
    {"sev_b", {"--seed", "2", "--input-size", "48", "--lr", "0.02"}},
};

struct Pipeline {
  fs::path dir;
  fs::path data;
  Manifest manifest;
  SplitSpec split;
  double referable_seconds = 0.0;  // synth, candidates, ensemble, inference, evaluation
  double laterality_seconds = 0.0;

  fs::path at(const std::string& name) const { return dir / name; }
  std::string manifest_path() const { return (data / "manifest.jsonl").string(); }
  std::string split_path() const { return at("split.json").string(); }

  std::vector<std::string> train_args(const std::string& task, const Candidate& c) const {
    std::vector<std::string> a{"train", "--task", task, "--manifest", manifest_path(), "--split", split_path(),
                               "--split-fractions", "0.64,0.16,0.2", "--out", at(c.name + ".rsck").string()};
    a.insert(a.end(), c.flags.begin(), c.flags.end());
    return a;
  }
  std::vector<std::string> ensemble_args(const std::string& task, const std::vector<Candidate>& cs,
                                         const std::string& out) const {
    std::vector<std::string> a{"ensemble", "--task", task, "--manifest", manifest_path(), "--split", split_path(),
                               "--out", at(out).string(), "--specificity", "0.87", "--candidates"};
    for (const auto& c : cs) a.push_back(at(c.name + ".rsck").string());
    return a;
  }
  std::vector<std::string> infer_args() const {
    return {"infer", "--manifest", manifest_path(), "--split", split_path(), "--part", "test", "--laterality",
            at("lat.rsck").string(), "--referable", at("ref_ens.json").string(), "--severity",
            at("sev_ens.json").string(), "--out", at("infer").string(), "--raw-maps"};
  }
  std::vector<std::string> eval_referable_args() const {
    return {"eval", "--pred", at("infer/predictions.csv").string(), "--labels", manifest_path(), "--delong",
            "--specificity", "0.87", "--out", at("eval_referable").string()};
  }
  std::vector<std::string> eval_severity_args() const {
    return {"eval", "--pred", at("infer/predictions.csv").string(), "--labels", manifest_path(), "--severity-suite",
            "--delong", "--out", at("eval_severity").string()};
  }
  std::vector<std::string> laterality_args() const {
    return train_args("laterality", {"lat", {"--seed", "1"}});
  }
};

Pipeline run_pipeline(const fs::path& dir) {
  Pipeline p;
  p.dir = dir;
  p.data = dir / "data";
  fs::remove_all(dir);
  fs::create_directories(dir);

  auto t = Clock::now();
  cli({"synth", "--n-patients", std::to_string(kPatients), "--seed", std::to_string(kDatasetSeed), "--out",
       p.data.string()});
  const double synth_seconds = seconds_since(t);

  t = Clock::now();
  cli(p.laterality_args());
  p.laterality_seconds = seconds_since(t);

  t = Clock::now();
  for (const auto& c : kReferableCandidates) cli(p.train_args("referable", c));
  for (const auto& c : kSeverityCandidates) cli(p.train_args("severity", c));
  cli(p.ensemble_args("referable", kReferableCandidates, "ref_ens.json"));
  cli(p.ensemble_args("severity", kSeverityCandidates, "sev_ens.json"));
  cli(p.infer_args());
  cli(p.eval_referable_args());
  cli(p.eval_severity_args());
  p.referable_seconds = synth_seconds + seconds_since(t);

  p.manifest = read_manifest(p.data / "manifest.jsonl");
  p.split = split_from_json(read_json(p.at("split.json")));
  return p;
}

// ---- criteria -----------------------------------------------------------------------

Verdict gradient_correctness() {
  const auto t = Clock::now();
  double worst = 0.0;
  std::string worst_op;
  std::set<std::string> ops;
  for (int seed = 0; seed < kGradSeeds; ++seed)
    for (const auto& e : oracle::op_gradient_errors(seed)) {
      ops.insert(e.op);
      if (!(e.relative_error <= worst)) {
        worst = e.relative_error;
        worst_op = e.op;
      }
    }
  const double secs = seconds_since(t);
  const bool pass = worst < kGradTolerance && secs < kGradSeconds;
  return {pass, std::to_string(ops.size()) + " ops x " + std::to_string(kGradSeeds) + " seeds, worst relative error " +
                    num(worst) + " (" + worst_op + ") < " + num(kGradTolerance) + ", " + num(secs, 3) + " s < " +
                    num(kGradSeconds) + " s"};
}

Verdict auc_oracle_equivalence() {
  const auto t = Clock::now();
  std::mt19937_64 gen(2024);
  double worst = 0.0;
  for (int k = 0; k < kAucSets; ++k) {
    const int n = std::uniform_int_distribution<int>(kAucMinSize, kAucMaxSize)(gen);
    std::vector<double> scores(static_cast<std::size_t>(n));
    std::vector<int> labels(static_cast<std::size_t>(n));
    const bool coarse = k % 2 == 0;  // many ties on even sets
    for (int i = 0; i < n; ++i) {
      labels[static_cast<std::size_t>(i)] = std::bernoulli_distribution(0.4)(gen) ? 1 : 0;
      const double s = std::normal_distribution<double>(labels[static_cast<std::size_t>(i)] * 0.8, 1.0)(gen);
      scores[static_cast<std::size_t>(i)] = coarse ? std::round(s * 4.0) / 4.0 : s;
    }
    labels[0] = 1;
    labels[1] = 0;
    worst = std::max(worst, std::abs(auc(scores, labels) - oracle::mann_whitney_auc(scores, labels)));
  }
  const double secs = seconds_since(t);
  return {worst <= kAucTolerance && secs < kAucSeconds,
          std::to_string(kAucSets) + " sets of size " + std::to_string(kAucMinSize) + "-" +
              std::to_string(kAucMaxSize) + ", max |trapezoid - Mann-Whitney| " + num(worst) + " <= " +
              num(kAucTolerance) + ", " + num(secs, 3) + " s < " + num(kAucSeconds) + " s"};
}

Verdict delong_vs_bootstrap() {
  const auto t = Clock::now();
  std::mt19937_64 gen(99);
  double worst = 0.0;
  for (int trial = 0; trial < kDelongTrials; ++trial) {
    ScoredSet s;
    for (int i = 0; i < 2 * kDelongPerClass; ++i) {
      const int label = i < kDelongPerClass ? 1 : 0;
      s.scores.push_back(std::normal_distribution<double>(label * 1.2, 1.0)(gen));
      s.labels.push_back(label);
    }
    const auto d = delong_ci(s);
    const auto b = oracle::bootstrap_auc_ci(s.scores, s.labels, kBootstrapResamples, 0.95,
                                            5000 + static_cast<std::uint64_t>(trial));
    worst = std::max({worst, std::abs(d.ci_lo - b.lo), std::abs(d.ci_hi - b.hi)});
  }
  ScoredSet separated;
  for (int i = 0; i < 40; ++i) {
    separated.scores.push_back(i < 20 ? 1.0 + i : -1.0 - i);
    separated.labels.push_back(i < 20 ? 1 : 0);
  }
  const double variance = delong_ci(separated).variance;
  const double secs = seconds_since(t);
  return {worst <= kDelongTolerance && variance == 0.0 && secs < kDelongSeconds,
          std::to_string(kDelongTrials) + " trials, max CI endpoint gap to " + std::to_string(kBootstrapResamples) +
              "-resample bootstrap " + num(worst) + " <= " + num(kDelongTolerance) +
              ", separated-input variance " + num(variance) + ", " + num(secs, 3) + " s < " + num(kDelongSeconds) +
              " s"};
}

Verdict referable_detection(const Pipeline& p) {
  const auto report = read_json(p.at("eval_referable/report.json"));
  const double reported_auc = report.at("roc").at("auc");
  const auto& op = report.at("operating_points").at(0);
  const double reported_sens = op.at("sensitivity");

  const auto labels = eye_labels(p.manifest);
  const auto rows = read_csv(p.at("infer/predictions.csv"));
  std::vector<double> scores;
  std::vector<int> y;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() < 2 || rows[r][1].empty()) continue;
    scores.push_back(std::stod(rows[r][1]));
    y.push_back(labels.referable.at(rows[r][0]));
  }
  const double oracle_auc = oracle::mann_whitney_auc(scores, y);
  const double oracle_sens = sweep_sensitivity_at(scores, y, kOperatingSpecificity);

  // Threshold fixed on validation, applied to test, for the record only.
  ScoredSet test_set{scores, y, {}, "eye"};
  const auto ens = read_json(p.at("ref_ens.json"));
  const auto at_val = evaluate_threshold(test_set, ens.at("operating_threshold").get<double>());

  const bool agree = std::abs(reported_auc - oracle_auc) <= 1e-9 && std::abs(reported_sens - oracle_sens) <= 1e-12;
  const bool pass = p.split.test().size() == static_cast<std::size_t>(kTestPatients) && agree &&
                    reported_auc >= kReferableAuc && reported_sens >= kReferableSensitivity &&
                    p.referable_seconds < kEndToEndSeconds;
  return {pass, std::to_string(p.split.test().size()) + " test patients, " + std::to_string(scores.size()) +
                    " eyes: AUC " + num(reported_auc) + " (oracle " + num(oracle_auc) + ") >= " + num(kReferableAuc) +
                    ", sensitivity " + num(reported_sens) + " (oracle " + num(oracle_sens) + ") >= " +
                    num(kReferableSensitivity) + " at specificity " + num(op.at("specificity").get<double>()) +
                    "; validation threshold gives sens " + num(at_val.sensitivity) + " spec " +
                    num(at_val.specificity) + "; " + num(p.referable_seconds, 4) + " s < " + num(kEndToEndSeconds) +
                    " s"};
}

Verdict laterality(const Pipeline& p) {
  const auto t = Clock::now();
  // Route 1: the inference reports.
  std::size_t reported = 0, reported_correct = 0;
  std::istringstream in(slurp(p.at("infer/reports.jsonl")));
  for (std::string line; std::getline(in, line);) {
    const auto exam = json::parse(line);
    for (const auto& img : exam.at("images")) {
      if (!img.at("readable").get<bool>() || !img.contains("recorded_laterality")) continue;
      ++reported;
      reported_correct += img.at("laterality") == img.at("recorded_laterality");
    }
  }
  // Route 2: the checkpoint applied directly to every held-out image.
  const auto model = dl::load_checkpoint(p.at("lat.rsck"));
  std::size_t direct = 0, direct_correct = 0;
  for (const auto& exam : subset(p.manifest, p.split.test()).exams)
    for (const auto& img : exam.images) {
      if (!img.laterality) continue;
      ++direct;
      direct_correct += classify_laterality(model, read_image(p.manifest.resolve(img.path))).first == *img.laterality;
    }
  const double acc = reported ? double(reported_correct) / double(reported) : 0.0;
  const double direct_acc = direct ? double(direct_correct) / double(direct) : 0.0;
  const double secs = p.laterality_seconds + seconds_since(t);
  const bool pass = reported >= kLateralityImages && direct == reported && direct_correct == reported_correct &&
                    acc >= kLateralityAccuracy && secs < kLateralitySeconds;
  return {pass, "held-out accuracy " + num(acc, 6) + " on " + std::to_string(reported) + " images (direct " +
                    num(direct_acc, 6) + " on " + std::to_string(direct) + ") >= " + num(kLateralityAccuracy) +
                    ", >= " + std::to_string(kLateralityImages) + " images, " + num(secs, 3) + " s < " +
                    num(kLateralitySeconds) + " s"};
}

Verdict severity_ordering(const Pipeline& p) {
  const auto report = read_json(p.at("eval_severity/report.json"));
  std::map<int, double> reported;
  for (const auto& c : report.at("severity_suite")) reported[c.at("grade_at_least").get<int>()] = c.at("auc");

  const auto labels = eye_labels(p.manifest);
  const auto rows = read_csv(p.at("infer/predictions.csv"));
  const auto& header = rows.at(0);
  std::map<int, double> oracle_auc;
  for (int t = 1; t <= 4; ++t) {
    const auto col = static_cast<std::size_t>(std::find(header.begin(), header.end(), "ge" + std::to_string(t)) -
                                              header.begin());
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (col >= rows[r].size() || rows[r][col].empty()) continue;
      s.push_back(std::stod(rows[r][col]));
      y.push_back(labels.grade.at(rows[r][0]) >= t ? 1 : 0);
    }
    oracle_auc[t] = oracle::mann_whitney_auc(s, y);
  }
  bool agree = true;
  for (int t = 1; t <= 3; ++t) agree = agree && reported.count(t) && std::abs(reported[t] - oracle_auc[t]) <= 1e-9;
  const double mild = reported[1], moderate = reported[2], severe = reported[3];
  const bool pass = agree && severe >= moderate - kSeverityTolerance && moderate >= mild - kSeverityTolerance &&
                    mild >= kSeverityFloor && moderate >= kSeverityFloor && severe >= kSeverityFloor;
  return {pass, "AUC >=severe " + num(severe) + ", >=moderate " + num(moderate) + ", >=mild " + num(mild) +
                    " (oracle " + num(oracle_auc[3]) + ", " + num(oracle_auc[2]) + ", " + num(oracle_auc[1]) +
                    "; PDR " + num(reported.count(4) ? reported[4] : NAN) + "), ordering tolerance " +
                    num(kSeverityTolerance) + ", each >= " + num(kSeverityFloor)};
}

using Transform = std::function<double(double)>;

// Random strictly increasing maps on [0, 1].
std::vector<Transform> monotone_transforms(int count, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Transform> out;
  for (int k = 0; k < count; ++k) {
    const double a = 0.5 + 4.5 * u(gen), b = 2.0 * u(gen) - 1.0;
    switch (k % 5) {
      case 0: out.push_back([=](double x) { return a * x + b; }); break;
      case 1: out.push_back([=](double x) { return std::exp(a * x) + b; }); break;
      case 2: out.push_back([=](double x) { return std::log(x + 0.1 * a) - b; }); break;
      case 3: out.push_back([=](double x) { return std::pow(x + 1.0, a) + b; }); break;
      default: out.push_back([=](double x) { return a * x * x * x + x + b; }); break;
    }
  }
  return out;
}

std::size_t first_argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// Eye-level validation AUC of a candidate: max image probability per eye, recorded laterality.
double validation_auc(const dl::MicroCnnModel& model, const Pipeline& p) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& exam : subset(p.manifest, p.split.validation()).exams)
    for (Side side : {Side::left, Side::right}) {
      if (!exam.eye(side)) continue;
      double best = -1.0;
      for (const auto& img : exam.images) {
        if (img.laterality != side) continue;
        const auto pre = normalize(read_image(p.manifest.resolve(img.path)), model.config().input_size, img.path);
        best = std::max(best, static_cast<double>(dl::forward(model, pre.tensor)[1]));
      }
      if (best < 0.0) continue;
      scores.push_back(best);
      labels.push_back(referable_label(*exam.eye(side)) ? 1 : 0);
    }
  return oracle::mann_whitney_auc(scores, labels);
}

Verdict em_mechanism(const Pipeline& p) {
  // (a) Selection invariant under monotone rescoring.
  const auto model = dl::load_checkpoint(p.at("ref_a.rsck"));
  const auto bags = build_eye_bags(p.manifest, &p.split.validation(), Task::referable, model.config().input_size);
  const auto transforms = monotone_transforms(kMonotoneTransforms, 77);
  std::size_t checks = 0, mismatches = 0;
  for (const auto& bag : bags) {
    const auto chosen = em_select(model, bag);
    const auto scores = bag_scores(model, bag);
    for (const auto& f : transforms) {
      std::vector<double> mapped(scores.size());
      std::transform(scores.begin(), scores.end(), mapped.begin(), f);
      ++checks;
      mismatches += first_argmax(mapped) != chosen;
    }
  }

  // (b) One image per training eye per epoch, for every candidate.
  std::size_t train_eyes = 0;
  for (const auto& exam : subset(p.manifest, p.split.train()).exams)
    for (Side side : {Side::left, Side::right})
      if (exam.eye(side) && std::any_of(exam.images.begin(), exam.images.end(),
                                        [&](const ImageEntry& i) { return i.laterality == side; }))
        ++train_eyes;
  std::size_t epochs = 0, bad_epochs = 0;
  std::vector<Candidate> all = kReferableCandidates;
  all.insert(all.end(), kSeverityCandidates.begin(), kSeverityCandidates.end());
  for (const auto& c : all) {
    const auto rows = read_csv(p.at(c.name + ".history.csv"));
    const auto col = static_cast<std::size_t>(
        std::find(rows[0].begin(), rows[0].end(), "trained_images") - rows[0].begin());
    for (std::size_t r = 1; r < rows.size(); ++r) {
      ++epochs;
      bad_epochs += std::stoul(rows[r].at(col)) != train_eyes;
    }
  }

  // (c) Greedy trajectory against independently scored single candidates.
  const auto ens = read_json(p.at("ref_ens.json"));
  std::vector<double> trajectory;
  for (const auto& r : ens.at("selection_log"))
    if (r.at("accepted").get<bool>()) trajectory.push_back(r.at("auc"));
  bool increasing = !trajectory.empty();
  for (std::size_t i = 1; i < trajectory.size(); ++i) increasing = increasing && trajectory[i] > trajectory[i - 1];
  double best_single = 0.0;
  std::string singles;
  for (const auto& c : kReferableCandidates) {
    const double a = validation_auc(dl::load_checkpoint(p.at(c.name + ".rsck")), p);
    singles += (singles.empty() ? "" : ", ") + num(a, 6);
    best_single = std::max(best_single, a);
  }
  const double final_auc = trajectory.empty() ? 0.0 : trajectory.back();
  std::string traj;
  for (double v : trajectory) traj += (traj.empty() ? "" : " < ") + num(v, 6);

  const bool pass = checks > 0 && mismatches == 0 && epochs > 0 && bad_epochs == 0 && increasing &&
                    final_auc >= best_single - 1e-9;
  return {pass, std::to_string(bags.size()) + " bags x " + std::to_string(kMonotoneTransforms) +
                    " transforms, " + std::to_string(mismatches) + " selection changes; " + std::to_string(epochs) +
                    " epochs all training " + std::to_string(train_eyes) + " images (" + std::to_string(bad_epochs) +
                    " off); trajectory " + traj + ", final " + num(final_auc, 6) + " >= best single " +
                    num(best_single, 6) + " (singles " + singles + ")"};
}

bool oracle_hit(const std::vector<std::uint8_t>& mask, int w, int h, int x, int y, double radius) {
  for (int yy = 0; yy < h; ++yy)
    for (int xx = 0; xx < w; ++xx)
      if (mask[static_cast<std::size_t>(yy * w + xx)] &&
          std::hypot(double(xx - x), double(yy - y)) <= radius)
        return true;
  return false;
}

Verdict heatmap_localization(const Pipeline& p) {
  const auto ensemble = load_ensemble(p.at("ref_ens.json"));
  SynthParams params;
  std::mt19937_64 gen(31337);
  int hits = 0, oracle_hits = 0;
  for (int k = 0; k < kPointingImages; ++k) {
    const auto grade = static_cast<Grade>(2 + k % 3);
    const bool me = std::bernoulli_distribution(params.me_probability_by_grade[static_cast<std::size_t>(2 + k % 3)])(gen);
    const auto side = k % 2 ? Side::right : Side::left;
    const auto img = generate_image(grade, me, side, params, 900000 + static_cast<std::uint64_t>(k));
    MultiScaleImage ms(img.raw, "pointing_" + std::to_string(k));
    const auto map = ensemble_gradient_map(ensemble, ms);
    const auto [x, y] = argmax_in_raw(map);
    hits += hits_dilated_mask(img.lesion_mask, img.raw.width, img.raw.height, x, y, kPointingRadius);
    oracle_hits += oracle_hit(img.lesion_mask, img.raw.width, img.raw.height, x, y, kPointingRadius);
  }
  // All-zero parameters must give an all-zero map.
  Ensemble zero;
  for (int size : {32, kLargestInput}) {
    dl::MicroCnnConfig c;
    c.input_size = size;
    dl::MicroCnnModel m(c);
    for (auto& prm : m.parameters())
      for (auto& v : prm.value.mutable_values()) v = 0.0f;
    zero.members.push_back(std::move(m));
  }
  std::size_t nonzero = 0;
  for (int k = 0; k < 5; ++k) {
    MultiScaleImage ms(generate_image(Grade::severe, true, Side::left, params, 910000 + k).raw, "zero");
    for (float v : ensemble_gradient_map(zero, ms).values) nonzero += v != 0.0f;
  }
  const double rate = double(hits) / kPointingImages;
  const bool pass = hits == oracle_hits && rate >= kPointingHitRate && nonzero == 0;
  return {pass, "pointing-game hit rate " + num(rate) + " (oracle " + num(double(oracle_hits) / kPointingImages) +
                    ") over " + std::to_string(kPointingImages) + " positive images, " + num(kPointingRadius) +
                    "-px dilation, >= " + num(kPointingHitRate) + "; zero-parameter maps nonzero pixels: " +
                    std::to_string(nonzero)};
}

Verdict tsne_sanity() {
  std::mt19937_64 gen(4242);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<std::vector<double>> features;
  std::vector<int> labels;
  for (int i = 0; i < 120; ++i) {
    const int label = i % 2;
    std::vector<double> f(10);
    for (auto& v : f) v = noise(gen) + (label ? 6.0 : 0.0);
    features.push_back(std::move(f));
    labels.push_back(label);
  }
  TsneConfig config;
  config.seed = 3;
  const auto result = tsne(features, config);
  const double sil = oracle::silhouette(result.coordinates, labels);
  int windows = 0, violations = 0;
  double worst_rise = -INFINITY;
  for (int start = config.exaggeration_iterations; start + kKlWindow < config.iterations; start += kKlWindow) {
    ++windows;
    const double rise = result.kl_history[static_cast<std::size_t>(start + kKlWindow)] -
                        result.kl_history[static_cast<std::size_t>(start)];
    worst_rise = std::max(worst_rise, rise);
    violations += rise > kKlJitter;
  }
  return {sil > kSilhouette && windows > 0 && violations == 0,
          "silhouette " + num(sil) + " > " + num(kSilhouette) + "; " + std::to_string(windows) + " post-exaggeration " +
              std::to_string(kKlWindow) + "-iteration windows, largest KL rise " + num(worst_rise) + " <= " +
              num(kKlJitter)};
}

Verdict latency(const Pipeline& p) {
  // Every report carries timings.
  std::size_t images = 0, missing = 0;
  std::istringstream in(slurp(p.at("infer/reports.jsonl")));
  for (std::string line; std::getline(in, line);) {
    const auto j = json::parse(line);
    missing += !(j.contains("total_ms") && j.at("total_ms").is_number());
    for (const auto& img : j.at("images")) {
      ++images;
      missing += !(img.contains("latency_ms") && img.at("latency_ms").is_number() && img.at("latency_ms") > 0.0);
    }
  }

  // Largest configured input, maximal ensemble, heatmaps on.
  const fs::path dir = p.at("latency");
  fs::create_directories(dir / "heatmaps");
  Ensemble ensemble;
  for (int k = 0; k < kLatencyMembers; ++k) {
    dl::MicroCnnConfig c;
    c.input_size = kLargestInput;
    c.stage_count = 3;
    c.base_channels = 12;
    c.seed = 100 + static_cast<std::uint64_t>(k);
    ensemble.members.emplace_back(c);
    ensemble.members.back().meta.task = "referable";
  }
  InferenceModels models{dl::load_checkpoint(p.at("lat.rsck")), ensemble,
                         load_ensemble(p.at("sev_ens.json"))};
  InferenceOptions options;
  options.heatmap_dir = dir / "heatmaps";
  options.raw_maps = true;
  const auto test = subset(p.manifest, p.split.test());
  double worst_reported = 0.0, worst_wall = 0.0;
  std::size_t timed = 0;
  for (std::size_t e = 0; e < 25 && e < test.exams.size(); ++e) {
    const auto t = Clock::now();
    const auto report = diagnose_exam(test.exams[e], p.manifest, models, options);
    const double wall_per_image = 1000.0 * seconds_since(t) / static_cast<double>(report.images.size());
    worst_wall = std::max(worst_wall, wall_per_image);
    for (const auto& r : report.images) {
      ++timed;
      worst_reported = std::max(worst_reported, r.latency_ms);
    }
  }
  const bool pass = images > 0 && missing == 0 && timed > 0 && worst_reported <= kLatencyMs && worst_wall <= kLatencyMs;
  return {pass, "worst per-image latency " + num(worst_reported) + " ms (wall clock per image " + num(worst_wall) +
                    " ms) <= " + num(kLatencyMs) + " ms over " + std::to_string(timed) + " images, " +
                    std::to_string(kLatencyMembers) + " members at " + std::to_string(kLargestInput) +
                    " px plus heatmap; " + std::to_string(images) + " reported images, " + std::to_string(missing) +
                    " without latency"};
}

std::string without_timing(const fs::path& reports) {
  std::istringstream in(slurp(reports));
  std::string out;
  for (std::string line; std::getline(in, line);) {
    auto j = json::parse(line);
    j.erase("total_ms");
    for (auto& img : j.at("images")) {
      img.erase("latency_ms");
      img.erase("stage_ms");
    }
    out += j.dump() + "\n";
  }
  return out;
}

std::string without_last_column(const fs::path& csv) {
  std::istringstream in(slurp(csv));
  std::string out;
  for (std::string line; std::getline(in, line);) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

Verdict determinism(const Pipeline& p) {
  std::vector<std::string> failures;
  int commands = 0;
  auto rerun = [&](const std::string& name, const std::vector<std::string>& args, const std::vector<fs::path>& files) {
    ++commands;
    auto contents = [](const fs::path& f) {
      return fs::is_directory(f) ? snapshot(f) : std::map<std::string, std::string>{{"", slurp(f)}};
    };
    std::map<fs::path, std::map<std::string, std::string>> before;
    for (const auto& f : files) before[f] = contents(f);
    cli(args);
    for (const auto& f : files)
      if (contents(f) != before[f]) failures.push_back(name + ":" + f.filename().string());
  };

  rerun("synth",
        {"synth", "--n-patients", std::to_string(kPatients), "--seed", std::to_string(kDatasetSeed), "--out",
         p.data.string()},
        {p.data});
  rerun("train", p.train_args("referable", kReferableCandidates[0]),
        {p.at("ref_a.rsck"), p.at("ref_a.history.csv"), p.at("ref_a.provenance.json")});
  rerun("ensemble", p.ensemble_args("referable", kReferableCandidates, "ref_ens.json"), {p.at("ref_ens.json")});

  ++commands;
  const auto reports = without_timing(p.at("infer/reports.jsonl"));
  const auto summary = without_last_column(p.at("infer/summary.csv"));
  std::map<std::string, std::string> primary;
  for (const char* f : {"predictions.csv", "features.csv", "infer.provenance.json"}) primary[f] = slurp(p.at("infer") / f);
  const auto maps = snapshot(p.at("infer/heatmaps"));
  cli(p.infer_args());
  for (const auto& [f, bytes] : primary)
    if (slurp(p.at("infer") / f) != bytes) failures.push_back("infer:" + f);
  if (snapshot(p.at("infer/heatmaps")) != maps) failures.push_back("infer:heatmaps");
  if (without_timing(p.at("infer/reports.jsonl")) != reports) failures.push_back("infer:reports.jsonl");
  if (without_last_column(p.at("infer/summary.csv")) != summary) failures.push_back("infer:summary.csv");

  rerun("eval", p.eval_referable_args(), {p.at("eval_referable")});

  const std::vector<std::string> single_infer{
      "infer", "--manifest", p.manifest_path(), "--split", p.split_path(), "--laterality", p.at("lat.rsck").string(),
      "--referable", p.at("ref_single.json").string(), "--out", p.at("infer_single").string(), "--no-heatmaps"};
  cli({"ensemble", "--task", "referable", "--manifest", p.manifest_path(), "--split", p.split_path(), "--out",
       p.at("ref_single.json").string(), "--candidates", p.at("ref_c.rsck").string()});
  cli(single_infer);
  const std::vector<std::string> compare{"compare",  "--pred-a", p.at("infer/predictions.csv").string(),
                                         "--pred-b", p.at("infer_single/predictions.csv").string(),
                                         "--labels", p.manifest_path(),
                                         "--out",    p.at("compare.json").string()};
  cli(compare);
  rerun("compare", compare, {p.at("compare.json")});

  const std::vector<std::string> embed{"tsne",     "--features", p.at("infer/features.csv").string(),
                                       "--out",    p.at("tsne/embedding.csv").string(),
                                       "--labels", p.manifest_path(),
                                       "--seed",   "5"};
  cli(embed);
  rerun("tsne", embed, {p.at("tsne")});

  const auto first_image = p.manifest.resolve(subset(p.manifest, p.split.test()).exams.front().images.front().path);
  const std::vector<std::string> overlay{"heatmap", "--image", first_image.string(), "--ensemble",
                                         p.at("ref_ens.json").string(), "--out", p.at("heatmap/overlay.png").string(),
                                         "--raw-map", p.at("heatmap/map.png").string()};
  cli(overlay);
  rerun("heatmap", overlay, {p.at("heatmap")});

  std::string failed;
  for (const auto& f : failures) failed += " " + f;
  return {failures.empty(), std::to_string(commands) + " commands rerun with identical flags; " +
                                (failures.empty() ? "all primary outputs byte-identical" : "differences:" + failed)};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "retiscreen_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work-dir" && i + 1 < argc) {
      work = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--work-dir DIR]\n";
      return 1;
    }
  }

  std::map<int, std::pair<std::string, Verdict>> results;
  auto record = [&](int id, const std::string& name, const std::function<Verdict()>& check) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    results[id] = {name, v};
    std::cerr << "[acceptance] criterion " << id << " done\n";
  };

  record(1, "gradient correctness", gradient_correctness);
  record(2, "AUC oracle equivalence", auc_oracle_equivalence);
  record(3, "DeLong vs bootstrap", delong_vs_bootstrap);
  record(9, "t-SNE separation", tsne_sanity);

  std::optional<Pipeline> pipeline;
  std::string pipeline_error;
  try {
    pipeline = run_pipeline(work / "pipeline");
  } catch (const std::exception& e) {
    pipeline_error = e.what();
  }
  auto with_pipeline = [&](int id, const std::string& name, Verdict (*check)(const Pipeline&)) {
    record(id, name, [&]() -> Verdict {
      if (!pipeline) return {false, "pipeline failed: " + pipeline_error};
      return check(*pipeline);
    });
  };
  with_pipeline(4, "end-to-end referable detection", referable_detection);
  with_pipeline(5, "laterality", laterality);
  with_pipeline(6, "severity suite ordering", severity_ordering);
  with_pipeline(7, "EM mechanism", em_mechanism);
  with_pipeline(8, "heatmap localization", heatmap_localization);
  with_pipeline(10, "latency reporting", latency);
  with_pipeline(11, "determinism", determinism);

  int failed = 0;
  for (const auto& [id, entry] : results) {
    const auto& [name, v] = entry;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << id << ". " << name << ": " << v.detail << "\n";
    failed += !v.pass;
  }
  std::cout << (failed ? "FAILED " + std::to_string(failed) + " of " : "PASSED all ") << results.size()
            << " criteria\n";
  return failed ? 1 : 0;
}
