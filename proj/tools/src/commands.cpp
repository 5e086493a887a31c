#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "retiscreen/checkpoint.hpp"
#include "retiscreen/data_model.hpp"
#include "retiscreen/ensembling.hpp"
#include "retiscreen/eval_stats.hpp"
#include "retiscreen/file_util.hpp"
#include "retiscreen/heatmap.hpp"
#include "retiscreen/inference_engine.hpp"
#include "retiscreen/rng.hpp"
#include "retiscreen/synthetic_fundus.hpp"
#include "retiscreen/training_mil.hpp"
#include "retiscreen/tsne.hpp"

namespace fs = std::filesystem;

namespace retiscreen::cli {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

/// "<dir>/<stem>.<suffix>" next to an artifact.
fs::path sibling(const fs::path& artifact, const std::string& suffix) {
  auto p = artifact;
  p.replace_extension();
  p += "." + suffix;
  return p;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  ensure_parent(path);
  write_text_atomic(path, j.dump(2) + "\n");
}

// ---- CSV tables -------------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name, const fs::path& source) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(source.string() + ": no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

Table read_table(const fs::path& path) {
  const auto text = read_text_file(path);
  std::istringstream in(text);
  Table t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.find('"') != std::string::npos) throw DataError(path.string() + ": quoted CSV fields are not supported");
    auto cells = split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw DataError(path.string() + " line " + std::to_string(line_no) + ": expected " +
                      std::to_string(t.header.size()) + " fields, got " + std::to_string(cells.size()));
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw DataError(path.string() + ": empty CSV file");
  return t;
}

double parse_double(const std::string& s, const fs::path& source) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(source.string() + ": '" + s + "' is not a number");
  }
}

// ---- labels from manifests ----------------------------------------------------

std::optional<int> eye_label(const EyeGrade& g, const std::string& kind) {
  if (!g.gradable) return std::nullopt;
  if (kind == "referable") return referable_label(g) ? 1 : 0;
  if (kind == "vision-threatening") return vision_threatening_label(g) ? 1 : 0;
  if (kind.size() == 3 && kind.rfind("ge", 0) == 0) return grade_at_least(g.grade, kind[2] - '0') ? 1 : 0;
  throw std::invalid_argument("unknown label kind " + kind);
}

class LabelIndex {
 public:
  explicit LabelIndex(const Manifest& m) {
    for (const auto& exam : m.exams) {
      for (Side side : {Side::left, Side::right})
        if (exam.eye(side)) eyes_[eye_id(exam, side)] = *exam.eye(side);
      patients_[exam.patient_id].push_back(&exam);
    }
  }

  /// Label of an eye id ("exam:side") or a patient id (positive if any eye is).
  /// nullopt when ungradable; DataError when unknown.
  std::optional<int> label(const std::string& unit, const std::string& kind) const {
    if (const auto it = eyes_.find(unit); it != eyes_.end()) return eye_label(it->second, kind);
    if (const auto it = patients_.find(unit); it != patients_.end()) {
      std::optional<int> out;
      for (const auto* exam : it->second)
        for (Side side : {Side::left, Side::right})
          if (exam->eye(side))
            if (auto l = eye_label(*exam->eye(side), kind)) out = std::max(out.value_or(0), *l);
      return out;
    }
    throw DataError("unit '" + unit + "' is neither an eye nor a patient of the label manifest");
  }

  std::optional<int> grade(const std::string& unit) const {
    const auto it = eyes_.find(unit);
    if (it == eyes_.end()) throw DataError("severity suite needs eye ids; '" + unit + "' is not an eye of the manifest");
    if (!it->second.gradable) return std::nullopt;
    return to_int(it->second.grade);
  }

 private:
  std::map<std::string, EyeGrade> eyes_;
  std::map<std::string, std::vector<const ExamRecord*>> patients_;
};

ScoredSet scored_set(const fs::path& pred, const std::string& column, const LabelIndex& labels,
                     const std::string& kind, const Context& ctx) {
  const auto table = read_table(pred);
  const auto id_col = table.column("unit_id", pred);
  const auto score_col = table.column(column, pred);
  ScoredSet set;
  std::size_t skipped = 0;
  std::set<std::string> seen;
  for (const auto& row : table.rows) {
    const auto& id = row[id_col];
    if (!seen.insert(id).second) throw DataError(pred.string() + ": duplicate unit_id " + id);
    const auto label = labels.label(id, kind);
    if (row[score_col].empty() || !label) {
      ++skipped;
      continue;
    }
    set.ids.push_back(id);
    set.scores.push_back(parse_double(row[score_col], pred));
    set.labels.push_back(*label);
  }
  if (skipped) ctx.log("skipped " + std::to_string(skipped) + " unscored or ungradable units");
  set.unit = set.ids.empty() || set.ids.front().find(':') != std::string::npos ? "eye" : "patient";
  set.validate();
  if (set.positives() == 0 || set.negatives() == 0)
    throw DataError("labels '" + kind + "' of " + pred.string() + " contain a single class");
  return set;
}

// ---- datasets -----------------------------------------------------------------

SplitSpec load_or_create_split(const fs::path& path, const Manifest& manifest, std::span<const double> fractions,
                               std::uint64_t seed, const Context& ctx) {
  if (fs::exists(path)) {
    try {
      return split_from_json(nlohmann::json::parse(read_text_file(path)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  auto split = split_by_patient(manifest, fractions, seed);
  auto j = split_to_json(split);
  j["provenance"] = ctx.provenance(seed);
  write_json(path, j);
  ctx.log("wrote split " + path.string());
  return split;
}

SplitSpec load_split(const fs::path& path) {
  try {
    return split_from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

const std::set<std::string>& split_part(const SplitSpec& split, const std::string& name) {
  const int index = name == "train" ? 0 : name == "validation" ? 1 : 2;
  if (static_cast<std::size_t>(index) >= split.parts.size()) throw DataError("split has no " + name + " part");
  return split.parts[static_cast<std::size_t>(index)];
}

Manifest exam_dir_manifest(const fs::path& dir) {
  Manifest m;
  m.base_dir = dir;
  ExamRecord exam;
  exam.patient_id = exam.exam_id = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename().string();
    const auto ext = entry.path().extension().string();
    if (name.size() > 9 && name.substr(name.size() - 9) == ".mask.png") continue;
    if (ext == ".png" || ext == ".ppm" || ext == ".PNG" || ext == ".PPM") names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw DataError("no PNG or PPM images in " + dir.string());
  for (auto& n : names) exam.images.push_back({n, std::nullopt});
  m.exams.push_back(std::move(exam));
  return m;
}

}  // namespace

// ---- synth ----------------------------------------------------------------------

int run_synth(const Context& ctx, const SynthOptions& o) {
  SynthParams params;
  params.image_size = o.image_size;
  params.images_per_eye = o.images_per_eye;
  params.illumination_gradient_amplitude = o.illumination;
  params.me_exudate_radius = 10.0 * o.image_size / 64.0;
  params.seed = o.seed;
  const fs::path out(o.out);
  const auto manifest = generate_dataset(o.n_patients, o.grade_distribution, params, o.seed, out);
  write_json(out / "manifest.provenance.json", ctx.provenance(o.seed));
  std::array<int, 5> counts{};
  std::size_t images = 0;
  for (const auto& e : manifest.exams) {
    images += e.images.size();
    for (Side s : {Side::left, Side::right}) ++counts[static_cast<std::size_t>(to_int(e.eye(s)->grade))];
  }
  ctx.out << "patients " << manifest.exams.size() << ", images " << images << ", eyes by grade";
  for (int c : counts) ctx.out << ' ' << c;
  ctx.out << "\nmanifest " << (out / "manifest.jsonl").string() << '\n';
  return 0;
}

// ---- train ----------------------------------------------------------------------

int run_train(const Context& ctx, const TrainOptions& o) {
  const auto manifest = read_manifest(o.manifest);
  const auto split = load_or_create_split(o.split, manifest, o.split_fractions, o.seed, ctx);
  TrainConfig config;
  config.task = task_from_string(o.task);
  dl::MicroCnnConfig cnn;
  cnn.input_size = o.input_size;
  cnn.stage_count = o.stages;
  cnn.base_channels = o.base_channels;
  cnn.initial_learning_rate = o.lr;
  cnn.seed = derive_seed(o.seed, {hash_string("init")});
  config.cnn = cnn_config_for(config.task, cnn);
  config.max_epochs = o.epochs;
  config.patience = o.patience;
  config.batch_size = static_cast<std::size_t>(o.batch_size);
  config.class_weight_power = o.class_weight_power;
  config.mirror_augment = !o.no_augment;
  config.seed = o.seed;
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  auto on_epoch = [&](const EpochRecord& r) {
    ctx.log("epoch " + std::to_string(r.epoch) + " lr " + fmt(r.learning_rate) + " loss " + fmt(r.train_loss) +
            " val " + fmt(r.val_metric) + (r.improved ? " *" : ""));
  };
  TrainResult result = [&] {
    if (config.task == Task::laterality) {
      const auto train = build_laterality_set(manifest, &split.train(), o.input_size);
      const auto val = build_laterality_set(manifest, &split.validation(), o.input_size);
      ctx.log("laterality images: " + std::to_string(train.size()) + " train, " + std::to_string(val.size()) +
              " validation");
      return fit_image_model(train, val, config, on_epoch);
    }
    const auto train = build_eye_bags(manifest, &split.train(), config.task, o.input_size);
    const auto val = build_eye_bags(manifest, &split.validation(), config.task, o.input_size);
    ctx.log("eyes: " + std::to_string(train.size()) + " train, " + std::to_string(val.size()) + " validation");
    return fit_eye_model(train, val, config, on_epoch);
  }();

  const fs::path out(o.out);
  ensure_parent(out);
  const auto prov = ctx.provenance(o.seed);
  dl::save_checkpoint(result.model, out, prov);
  write_text_atomic(sibling(out, "history.csv"), history_csv(result.history));
  write_json(sibling(out, "provenance.json"), prov);
  ctx.out << "task " << o.task << ", epochs " << result.history.size() << ", best epoch " << result.best_epoch
          << ", best validation " << fmt(result.model.meta.best_validation_metric) << "\ncheckpoint " << out.string()
          << '\n';
  return 0;
}

// ---- ensemble -------------------------------------------------------------------

int run_ensemble(const Context& ctx, const EnsembleOptions& o) {
  const auto task = task_from_string(o.task);
  const auto manifest = read_manifest(o.manifest);
  const auto split = load_split(o.split);
  std::vector<dl::MicroCnnModel> candidates;
  for (const auto& path : o.candidates) {
    auto model = dl::load_checkpoint(path);
    if (model.config().output_size() != task_classes(task))
      throw DataError(path + " has " + std::to_string(model.config().output_size()) + " outputs; task " + o.task +
                      " needs " + std::to_string(task_classes(task)));
    candidates.push_back(std::move(model));
  }
  BagsBySize val;
  for (const auto& m : candidates) {
    const int size = m.config().input_size;
    if (!val.count(size)) val[size] = build_eye_bags(manifest, &split.validation(), task, size);
  }
  const auto selection = greedy_select(candidates, val, task, o.epsilon);

  Ensemble ensemble;
  const fs::path out(o.out);
  for (auto idx : selection.members) {
    ensemble.members.push_back(candidates[idx]);
    ensemble.member_paths.push_back(fs::absolute(o.candidates[idx]).lexically_normal().string());
  }
  if (task == Task::referable) {
    const auto probs = candidate_probabilities(ensemble.members, val);
    const auto& bags = val.begin()->second;
    ScoredSet set;
    std::size_t row = 0;
    for (const auto& bag : bags) {
      double best = -1.0;
      for (std::size_t k = 0; k < bag.images.size(); ++k, ++row) {
        std::vector<std::vector<float>> rows;
        for (const auto& p : probs) rows.push_back(p[row]);
        best = std::max(best, static_cast<double>(mean_probabilities(rows)[1]));
      }
      set.scores.push_back(best);
      set.labels.push_back(bag.label);
    }
    const auto op = operating_point(set, {Constraint::Kind::specificity, o.specificity});
    ensemble.operating_threshold = op.threshold;
    ctx.log("operating threshold " + fmt(op.threshold) + " (validation sensitivity " + fmt(op.sensitivity) +
            ", specificity " + fmt(op.specificity) + ")");
  }
  ensure_parent(out);
  const auto prov = ctx.provenance(0);
  save_ensemble_manifest(out, ensemble, &selection, &prov);
  for (const auto& r : selection.log)
    ctx.out << "round " << r.round << ": candidate " << r.candidate << " (" << o.candidates[r.candidate]
            << ") validation " << fmt(r.metric) << (r.accepted ? " accepted" : " rejected") << '\n';
  ctx.out << "ensemble of " << ensemble.members.size() << " written to " << out.string() << '\n';
  return 0;
}

// ---- infer ----------------------------------------------------------------------

int run_infer(const Context& ctx, const InferOptions& o) {
  Manifest manifest = o.manifest.empty() ? exam_dir_manifest(o.exam_dir) : read_manifest(o.manifest);
  if (!o.split.empty()) manifest = subset(manifest, split_part(load_split(o.split), o.part));
  if (manifest.exams.empty()) throw DataError("no exams to process");

  InferenceModels models{dl::load_checkpoint(o.laterality), load_ensemble(o.referable), std::nullopt};
  if (!o.severity.empty()) models.severity = load_ensemble(o.severity);
  InferenceOptions options;
  options.threshold = o.threshold.value_or(models.referable.operating_threshold.value_or(0.5));
  if (!(options.threshold > 0.0 && options.threshold < 1.0))
    throw DataError("operating threshold " + fmt(options.threshold) + " lies outside (0,1)");
  options.heatmaps = !o.no_heatmaps;
  options.raw_maps = o.raw_maps;
  options.overlay_threshold = o.overlay_threshold;
  options.penultimate_features = o.features == "penultimate";
  const fs::path out(o.out);
  fs::create_directories(out);
  if (options.heatmaps) {
    options.heatmap_dir = out / "heatmaps";
    fs::create_directories(*options.heatmap_dir);
  }

  std::string reports, summary = summary_csv_header();
  std::string predictions = "unit_id,score,ge1,ge2,ge3,ge4\n";
  struct Feature {
    double score = -1.0;
    std::vector<float> values;
  };
  std::map<std::string, Feature> features;
  std::size_t images = 0, failures = 0;
  double latency = 0.0;
  for (const auto& exam : manifest.exams) {
    const auto report = diagnose_exam(exam, manifest, models, options);
    reports += exam_report_json(report).dump() + "\n";
    summary += summary_csv_rows(report);
    if (!report.error.empty()) ++failures;
    for (const auto& eye : report.eyes) {
      predictions += eye_id(exam, eye.side) + ",";
      if (eye.assessed) {
        predictions += fmt(eye.referable_score);
        for (double g : eye.grade_scores) predictions += "," + (std::isnan(g) ? std::string() : fmt(g));
      } else {
        predictions += ",,,,";
      }
      predictions += "\n";
    }
    for (const auto& r : report.images) {
      if (!r.readable) continue;
      ++images;
      latency += r.latency_ms;
      auto& f = features[exam.patient_id];
      if (r.referable_probability > f.score) {
        f.score = r.referable_probability;
        f.values.clear();
        const auto& source = options.penultimate_features ? r.referable_member_features : r.referable_member_probabilities;
        for (const auto& member : source) f.values.insert(f.values.end(), member.begin(), member.end());
      }
    }
  }
  std::string feature_csv = "unit_id";
  const auto width = features.empty() ? 0 : features.begin()->second.values.size();
  for (std::size_t k = 0; k < width; ++k) feature_csv += ",f" + std::to_string(k);
  feature_csv += "\n";
  for (const auto& [id, f] : features) {
    feature_csv += id;
    for (float v : f.values) feature_csv += "," + fmt(v);
    feature_csv += "\n";
  }
  write_text_atomic(out / "reports.jsonl", reports);
  write_text_atomic(out / "summary.csv", summary);
  write_text_atomic(out / "predictions.csv", predictions);
  write_text_atomic(out / "features.csv", feature_csv);
  write_json(out / "infer.provenance.json", ctx.provenance(0));
  ctx.out << "exams " << manifest.exams.size() << ", images " << images << ", failed exams " << failures
          << ", threshold " << fmt(options.threshold) << ", mean latency " << fmt(images ? latency / images : 0.0)
          << " ms/image\n";
  return failures == manifest.exams.size() ? 2 : 0;
}

// ---- eval -----------------------------------------------------------------------

int run_eval(const Context& ctx, const EvalOptions& o) {
  const auto manifest = read_manifest(o.labels);
  const LabelIndex labels(manifest);
  nlohmann::json report;
  report["provenance"] = ctx.provenance(0);
  const fs::path out_dir(o.out);
  if (!o.out.empty()) fs::create_directories(out_dir);

  if (o.severity_suite) {
    const auto table = read_table(o.pred);
    const auto id_col = table.column("unit_id", o.pred);
    std::array<std::size_t, 4> cols{};
    for (int t = 1; t <= 4; ++t) cols[static_cast<std::size_t>(t - 1)] = table.column("ge" + std::to_string(t), o.pred);
    std::vector<std::array<double, 4>> scores;
    std::vector<int> grades;
    for (const auto& row : table.rows) {
      const auto g = labels.grade(row[id_col]);
      if (!g || row[cols[0]].empty()) continue;
      std::array<double, 4> s{};
      for (std::size_t t = 0; t < 4; ++t) s[t] = parse_double(row[cols[t]], o.pred);
      scores.push_back(s);
      grades.push_back(*g);
    }
    std::vector<std::string> warnings;
    const auto suite = severity_roc_suite(scores, grades, &warnings);
    for (const auto& w : warnings) ctx.err << "warning: " << w << '\n';
    auto& curves = report["severity_suite"] = nlohmann::json::array();
    for (const auto& c : suite) {
      ctx.out << "grade >= " << c.threshold << ": AUC " << (o.delong ? format_auc_ci(c.curve) : fmt(c.curve.auc))
              << " (" << c.curve.positives << " positive, " << c.curve.negatives << " negative eyes)\n";
      auto j = roc_summary_json(c.curve);
      j["grade_at_least"] = c.threshold;
      curves.push_back(j);
      if (!o.out.empty())
        write_text_atomic(out_dir / ("roc_ge" + std::to_string(c.threshold) + ".csv"), roc_points_csv(c.curve));
    }
  } else {
    const auto set = scored_set(o.pred, o.column, labels, o.label, ctx);
    const auto curve = roc_curve(set, o.level);
    if (o.delong && !curve.has_ci) throw DataError("DeLong CI needs at least 2 cases per class");
    ctx.out << "units " << set.scores.size() << " (" << set.unit << "), positives " << curve.positives << '\n';
    ctx.out << "AUC " << (o.delong ? format_auc_ci(curve) : fmt(curve.auc)) << '\n';
    report["label"] = o.label;
    report["column"] = o.column;
    report["unit"] = set.unit;
    report["roc"] = roc_summary_json(curve);
    auto& ops = report["operating_points"] = nlohmann::json::array();
    auto add_op = [&](Constraint c, const char* name) {
      const auto op = operating_point(set, c);
      ctx.out << "at " << name << " >= " << fmt(c.value) << ": threshold " << fmt(op.threshold) << ", sensitivity "
              << fmt(op.sensitivity) << ", specificity " << fmt(op.specificity) << '\n';
      ops.push_back({{"constraint", name},
                     {"target", c.value},
                     {"threshold", std::isinf(op.threshold) ? nlohmann::json("inf") : nlohmann::json(op.threshold)},
                     {"sensitivity", op.sensitivity},
                     {"specificity", op.specificity}});
    };
    if (o.specificity) add_op({Constraint::Kind::specificity, *o.specificity}, "specificity");
    if (o.sensitivity) add_op({Constraint::Kind::sensitivity, *o.sensitivity}, "sensitivity");
    if (!o.out.empty()) write_text_atomic(out_dir / "roc.csv", roc_points_csv(curve));
  }
  if (!o.out.empty()) write_json(out_dir / "report.json", report);
  return 0;
}

// ---- compare --------------------------------------------------------------------

int run_compare(const Context& ctx, const CompareOptions& o) {
  const LabelIndex labels(read_manifest(o.labels));
  auto a = scored_set(o.pred_a, o.column, labels, o.label, ctx);
  auto b = scored_set(o.pred_b, o.column, labels, o.label, ctx);
  // Align b to a's case order.
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < b.ids.size(); ++k) index[b.ids[k]] = k;
  if (index.size() != a.ids.size()) throw DataError("prediction files score different cases");
  ScoredSet aligned = b;
  for (std::size_t k = 0; k < a.ids.size(); ++k) {
    const auto it = index.find(a.ids[k]);
    if (it == index.end()) throw DataError("case " + a.ids[k] + " missing from " + o.pred_b);
    aligned.ids[k] = b.ids[it->second];
    aligned.scores[k] = b.scores[it->second];
    aligned.labels[k] = b.labels[it->second];
  }
  const auto test = delong_paired_test(a, aligned);
  ctx.out << "AUC A " << fmt(test.auc_a) << ", AUC B " << fmt(test.auc_b) << ", z " << fmt(test.z) << ", p "
          << fmt(test.p) << '\n';
  if (!o.out.empty())
    write_json(o.out, {{"auc_a", test.auc_a},
                       {"auc_b", test.auc_b},
                       {"z", test.z},
                       {"p", test.p},
                       {"cases", a.scores.size()},
                       {"provenance", ctx.provenance(0)}});
  return 0;
}

// ---- tsne -----------------------------------------------------------------------

int run_tsne(const Context& ctx, const TsneOptions& o) {
  const auto table = read_table(o.features);
  const auto id_col = table.column("unit_id", o.features);
  std::vector<std::vector<double>> features;
  std::vector<std::string> ids;
  for (const auto& row : table.rows) {
    ids.push_back(row[id_col]);
    std::vector<double> f;
    for (std::size_t k = 0; k < row.size(); ++k)
      if (k != id_col) f.push_back(parse_double(row[k], o.features));
    features.push_back(std::move(f));
  }
  if (features.empty()) throw DataError(o.features + ": no rows");
  std::optional<LabelIndex> labels;
  if (!o.labels.empty()) labels.emplace(read_manifest(o.labels));
  TsneConfig config;
  config.perplexity = o.perplexity;
  config.iterations = o.iterations;
  config.seed = o.seed;
  const auto result = tsne(features, config);
  std::string csv = "id,x,y,label\n";
  for (std::size_t k = 0; k < ids.size(); ++k) {
    std::string label;
    if (labels)
      if (auto l = labels->label(ids[k], o.label)) label = std::to_string(*l);
    csv += ids[k] + "," + fmt(result.coordinates[k][0]) + "," + fmt(result.coordinates[k][1]) + "," + label + "\n";
  }
  std::string kl = "iteration,kl\n";
  for (std::size_t k = 0; k < result.kl_history.size(); ++k) kl += std::to_string(k) + "," + fmt(result.kl_history[k]) + "\n";
  const fs::path out(o.out);
  ensure_parent(out);
  write_text_atomic(out, csv);
  write_text_atomic(sibling(out, "kl.csv"), kl);
  write_json(sibling(out, "provenance.json"), ctx.provenance(o.seed));
  ctx.out << "embedded " << ids.size() << " points, final KL " << fmt(result.kl_history.back()) << '\n';
  return 0;
}

// ---- heatmap --------------------------------------------------------------------

int run_heatmap(const Context& ctx, const HeatmapOptions& o) {
  Ensemble ensemble;
  if (!o.checkpoint.empty()) {
    ensemble.members.push_back(dl::load_checkpoint(o.checkpoint));
    ensemble.member_paths.push_back(o.checkpoint);
  } else {
    ensemble = load_ensemble(o.ensemble);
  }
  MultiScaleImage image(read_image(o.image), o.image);
  const auto map = ensemble_gradient_map(ensemble, image, o.sigma);
  const fs::path out(o.out);
  ensure_parent(out);
  write_png(out, overlay_green(image.raw(), map, o.threshold));
  if (!o.raw_map.empty()) {
    ensure_parent(o.raw_map);
    write_map_png16(o.raw_map, map);
  }
  write_json(sibling(out, "provenance.json"), ctx.provenance(0));
  const auto [x, y] = argmax_in_raw(map);
  ctx.out << "overlay " << out.string() << ", peak evidence at (" << x << ", " << y << ")\n";
  return 0;
}

}  // namespace retiscreen::cli
