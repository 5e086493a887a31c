#include "retiscreen/ensembling.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "retiscreen/checkpoint.hpp"
#include "retiscreen/file_util.hpp"

namespace retiscreen {

void Ensemble::validate() const {
  if (members.empty()) throw std::invalid_argument("ensemble has no members");
  for (const auto& m : members)
    if (m.config().output_size() != members.front().config().output_size())
      throw std::invalid_argument("ensemble members disagree on output arity");
}

int Ensemble::output_size() const {
  validate();
  return members.front().config().output_size();
}

std::vector<int> Ensemble::input_sizes() const {
  std::vector<int> sizes;
  for (const auto& m : members) sizes.push_back(m.config().input_size);
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  return sizes;
}

std::vector<float> mean_probabilities(std::span<const std::vector<float>> rows) {
  if (rows.empty()) throw std::invalid_argument("mean of no probability vectors");
  std::vector<double> acc(rows.front().size(), 0.0);
  for (const auto& r : rows) {
    if (r.size() != acc.size()) throw std::invalid_argument("probability vectors differ in length");
    for (std::size_t k = 0; k < r.size(); ++k) acc[k] += r[k];
  }
  std::vector<float> out(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) out[k] = static_cast<float>(acc[k] / static_cast<double>(rows.size()));
  return out;
}

std::vector<float> ensemble_predict(const Ensemble& ensemble, MultiScaleImage& image) {
  ensemble.validate();
  std::vector<std::vector<float>> rows;
  for (const auto& m : ensemble.members) rows.push_back(dl::forward(m, image.at(m.config().input_size).tensor));
  return mean_probabilities(rows);
}

std::vector<float> ensemble_predict(const Ensemble& ensemble, const RawImage& raw) {
  MultiScaleImage image(raw, {});
  return ensemble_predict(ensemble, image);
}

GreedyResult greedy_select(std::size_t candidate_count, const SubsetMetric& metric, double epsilon) {
  if (candidate_count == 0) throw std::invalid_argument("greedy_select: no candidates");
  GreedyResult result;
  std::vector<bool> used(candidate_count, false);
  double current = 0.0;
  for (int round = 0; result.members.size() < candidate_count; ++round) {
    std::optional<std::size_t> best;
    double best_metric = 0.0;
    for (std::size_t c = 0; c < candidate_count; ++c) {
      if (used[c]) continue;
      auto trial = result.members;
      trial.push_back(c);
      const double m = metric(trial);
      if (!best || m > best_metric) {
        best = c;
        best_metric = m;
      }
    }
    const bool accept = result.members.empty() || best_metric - current > epsilon;
    result.log.push_back({round, *best, best_metric, accept});
    if (!accept) break;
    used[*best] = true;
    result.members.push_back(*best);
    result.trajectory.push_back(best_metric);
    current = best_metric;
  }
  return result;
}

namespace {

struct FlatBags {
  std::vector<std::size_t> owner;
  std::vector<int> labels;
};

FlatBags flatten(const std::vector<EyeBag>& bags) {
  FlatBags f;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    f.labels.push_back(bags[b].label);
    f.owner.insert(f.owner.end(), bags[b].images.size(), b);
  }
  return f;
}

}  // namespace

std::vector<std::vector<std::vector<float>>> candidate_probabilities(std::span<const dl::MicroCnnModel> candidates,
                                                                      const BagsBySize& val) {
  if (val.empty()) throw std::invalid_argument("no validation bags");
  const auto reference = flatten(val.begin()->second);
  for (const auto& [size, bags] : val) {
    const auto f = flatten(bags);
    if (f.owner != reference.owner || f.labels != reference.labels)
      throw std::invalid_argument("validation bags at size " + std::to_string(size) + " list different eyes");
  }
  std::vector<std::vector<std::vector<float>>> probs;
  for (const auto& model : candidates) {
    const auto it = val.find(model.config().input_size);
    if (it == val.end())
      throw std::invalid_argument("no validation bags at input size " + std::to_string(model.config().input_size));
    std::vector<dl::Tensor> images;
    for (const auto& bag : it->second)
      for (const auto& img : bag.images) images.push_back(img.tensor);
    probs.push_back(predict_many(model, images));
  }
  return probs;
}

GreedyResult greedy_select(std::span<const dl::MicroCnnModel> candidates, const BagsBySize& val, Task task,
                           double epsilon) {
  if (candidates.empty()) throw std::invalid_argument("greedy_select: no candidates");
  const auto probs = candidate_probabilities(candidates, val);
  const auto flat = flatten(val.begin()->second);
  auto metric = [&](std::span<const std::size_t> members) {
    std::vector<std::vector<float>> mean(flat.owner.size());
    std::vector<std::vector<float>> rows(members.size());
    for (std::size_t i = 0; i < flat.owner.size(); ++i) {
      for (std::size_t k = 0; k < members.size(); ++k) rows[k] = probs[members[k]][i];
      mean[i] = mean_probabilities(rows);
    }
    return eye_metric_from_probs(task, mean, flat.owner, flat.labels);
  };
  return greedy_select(candidates.size(), metric, epsilon);
}

nlohmann::json ensemble_manifest_json(const Ensemble& ensemble, const GreedyResult* selection) {
  ensemble.validate();
  nlohmann::json j;
  j["format"] = "retiscreen-ensemble";
  j["version"] = 1;
  j["combination"] = "mean";
  j["task"] = ensemble.members.front().meta.task;
  auto& members = j["members"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ensemble.members.size(); ++i) {
    nlohmann::json m{{"input_size", ensemble.members[i].config().input_size}};
    if (i < ensemble.member_paths.size()) m["checkpoint"] = ensemble.member_paths[i];
    members.push_back(std::move(m));
  }
  if (ensemble.operating_threshold) j["operating_threshold"] = *ensemble.operating_threshold;
  if (selection) {
    auto& log = j["selection_log"] = nlohmann::json::array();
    for (const auto& r : selection->log)
      log.push_back({{"round", r.round}, {"candidate", r.candidate}, {"auc", r.metric}, {"accepted", r.accepted}});
  }
  return j;
}

void save_ensemble_manifest(const std::filesystem::path& path, const Ensemble& ensemble, const GreedyResult* selection,
                            const nlohmann::json* provenance) {
  auto j = ensemble_manifest_json(ensemble, selection);
  if (ensemble.member_paths.size() != ensemble.members.size())
    throw std::invalid_argument("ensemble manifest needs a checkpoint path per member");
  const auto base = path.parent_path();
  for (std::size_t i = 0; i < ensemble.member_paths.size(); ++i) {
    std::filesystem::path p(ensemble.member_paths[i]);
    p = std::filesystem::proximate(std::filesystem::absolute(p), std::filesystem::absolute(base.empty() ? "." : base));
    j["members"][i]["checkpoint"] = p.generic_string();
  }
  if (provenance) j["provenance"] = *provenance;
  write_text_atomic(path, j.dump(2) + "\n");
}

Ensemble load_ensemble(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("ensemble manifest " + path.string() + ": " + e.what());
  }
  Ensemble e;
  try {
    for (const auto& m : j.at("members")) {
      const auto rel = m.at("checkpoint").get<std::string>();
      std::filesystem::path p(rel);
      if (p.is_relative()) p = path.parent_path() / p;
      e.members.push_back(dl::load_checkpoint(p));
      e.member_paths.push_back(p.string());
    }
    if (j.contains("operating_threshold")) e.operating_threshold = j["operating_threshold"].get<double>();
    e.validate();
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("ensemble manifest " + path.string() + ": " + ex.what());
  } catch (const std::invalid_argument& ex) {
    throw DataError("ensemble manifest " + path.string() + ": " + ex.what());
  }
  return e;
}

}  // namespace retiscreen
