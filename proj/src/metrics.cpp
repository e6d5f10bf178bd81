#include "mseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "mseg/ops.hpp"

namespace mseg {

namespace {

template <typename S>
void require_binary(const Tensor4<S>& t, const char* what) {
  for (Index i = 0; i < t.size(); ++i) {
    if (t[i] != S(0) && t[i] != S(1)) {
      throw Error(std::string("confusion: ") + what + " contains non-binary value " +
                  std::to_string(static_cast<double>(t[i])));
    }
  }
}

double ratio(std::uint64_t num, std::uint64_t den, bool vacuous) {
  if (den == 0) return vacuous ? 1.0 : 0.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

template <typename S>
Tensor4<S> binarize(const Tensor4<S>& prob, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw ConfigError("binarize: threshold " + std::to_string(threshold) + " outside [0, 1]");
  }
  Tensor4<S> out(prob.shape());
  for (Index i = 0; i < prob.size(); ++i) out[i] = static_cast<double>(prob[i]) >= threshold ? S(1) : S(0);
  return out;
}

template <typename S>
ConfusionCounts confusion(const Tensor4<S>& pred, const Tensor4<S>& gt) {
  if (!(pred.shape() == gt.shape())) {
    throw ShapeError("confusion: prediction " + to_string(pred.shape()) + " vs ground truth " + to_string(gt.shape()));
  }
  require_binary(pred, "prediction");
  require_binary(gt, "ground truth");
  ConfusionCounts c;
  for (Index i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == S(1);
    const bool g = gt[i] == S(1);
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

ScalarMetrics scalar_metrics(const ConfusionCounts& c) {
  const bool vacuous = c.tp == 0 && c.fp == 0 && c.fn == 0;
  ScalarMetrics m;
  m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, vacuous);
  m.iou = ratio(c.tp, c.tp + c.fp + c.fn, vacuous);
  m.precision = ratio(c.tp, c.tp + c.fp, vacuous);
  m.recall = ratio(c.tp, c.tp + c.fn, vacuous);
  const double pr = 4.0 * m.precision + m.recall;
  if (pr == 0.0) {
    m.f2 = vacuous ? 1.0 : 0.0;
  } else {
    m.f2 = 5.0 * m.precision * m.recall / pr;
  }
  m.accuracy = ratio(c.tp + c.tn, c.total(), true);
  return m;
}

template <typename S>
double mae(const Tensor4<S>& prob, const Tensor4<S>& gt) {
  if (!(prob.shape() == gt.shape())) {
    throw ShapeError("mae: prediction " + to_string(prob.shape()) + " vs ground truth " + to_string(gt.shape()));
  }
  if (prob.size() == 0) return 0.0;
  double sum = 0.0;
  for (Index i = 0; i < prob.size(); ++i) sum += std::abs(static_cast<double>(prob[i]) - static_cast<double>(gt[i]));
  return sum / static_cast<double>(prob.size());
}

MetricReport evaluate_pairs(std::vector<EvalPair> pairs, double threshold) {
  MetricReport report;
  report.threshold = threshold;
  std::sort(pairs.begin(), pairs.end(), [](const EvalPair& a, const EvalPair& b) { return a.id < b.id; });
  for (auto& pair : pairs) {
    Tensor4f prob = std::move(pair.prob);
    if (prob.h() != pair.gt.h() || prob.w() != pair.gt.w()) {
      prob = upsample_bilinear(prob, pair.gt.h(), pair.gt.w(), false);
    }
    ImageMetrics im;
    im.id = pair.id;
    im.counts = confusion(binarize(prob, threshold), pair.gt);
    im.metrics = scalar_metrics(im.counts);
    im.mae = mae(prob, pair.gt);
    report.images.push_back(std::move(im));
  }
  if (!report.images.empty()) {
    const double n = static_cast<double>(report.images.size());
    for (const auto& im : report.images) {
      report.mean.dice += im.metrics.dice;
      report.mean.iou += im.metrics.iou;
      report.mean.precision += im.metrics.precision;
      report.mean.recall += im.metrics.recall;
      report.mean.f2 += im.metrics.f2;
      report.mean.accuracy += im.metrics.accuracy;
      report.mean_mae += im.mae;
    }
    report.mean.dice /= n;
    report.mean.iou /= n;
    report.mean.precision /= n;
    report.mean.recall /= n;
    report.mean.f2 /= n;
    report.mean.accuracy /= n;
    report.mean_mae /= n;
  }
  return report;
}

MetricReport evaluate_dataset(const std::vector<std::pair<std::string, Tensor4f>>& preds,
                              const std::vector<std::pair<std::string, Tensor4f>>& gts, double threshold) {
  std::map<std::string, const Tensor4f*> gt_by_id;
  for (const auto& [id, t] : gts) gt_by_id.emplace(id, &t);
  std::set<std::string> pred_ids;
  for (const auto& [id, _] : preds) pred_ids.insert(id);

  std::vector<std::string> missing;
  for (const auto& [id, _] : gt_by_id) {
    if (pred_ids.count(id) == 0) missing.push_back("prediction for '" + id + "'");
  }
  for (const auto& id : pred_ids) {
    if (gt_by_id.count(id) == 0) missing.push_back("ground truth for '" + id + "'");
  }
  if (!missing.empty()) {
    std::string msg = "evaluate_dataset: id mismatch, missing";
    for (const auto& m : missing) msg += " " + m + ";";
    throw IoError(msg);
  }
  std::vector<EvalPair> pairs;
  for (const auto& [id, t] : preds) pairs.push_back({id, t, *gt_by_id.at(id)});
  return evaluate_pairs(std::move(pairs), threshold);
}

nlohmann::ordered_json to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["threshold"] = r.threshold;
  j["count"] = r.images.size();
  j["mdice"] = r.mean.dice;
  j["miou"] = r.mean.iou;
  j["precision"] = r.mean.precision;
  j["recall"] = r.mean.recall;
  j["f2"] = r.mean.f2;
  j["accuracy"] = r.mean.accuracy;
  j["mae"] = r.mean_mae;
  nlohmann::ordered_json images = nlohmann::ordered_json::array();
  for (const auto& im : r.images) {
    nlohmann::ordered_json e;
    e["id"] = im.id;
    e["tp"] = im.counts.tp;
    e["fp"] = im.counts.fp;
    e["fn"] = im.counts.fn;
    e["tn"] = im.counts.tn;
    e["dice"] = im.metrics.dice;
    e["iou"] = im.metrics.iou;
    e["precision"] = im.metrics.precision;
    e["recall"] = im.metrics.recall;
    e["f2"] = im.metrics.f2;
    e["accuracy"] = im.metrics.accuracy;
    e["mae"] = im.mae;
    images.push_back(std::move(e));
  }
  j["images"] = std::move(images);
  return j;
}

std::string format_table(const MetricReport& r) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-24s %8s %8s %8s %8s %8s %8s %8s\n", "image", "dice", "iou", "prec", "recall", "f2",
                "acc", "mae");
  os << buf;
  auto row = [&](const std::string& id, const ScalarMetrics& m, double e) {
    std::snprintf(buf, sizeof buf, "%-24s %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f\n", id.substr(0, 24).c_str(),
                  m.dice, m.iou, m.precision, m.recall, m.f2, m.accuracy, e);
    os << buf;
  };
  for (const auto& im : r.images) row(im.id, im.metrics, im.mae);
  row("mean (" + std::to_string(r.images.size()) + " images)", r.mean, r.mean_mae);
  std::snprintf(buf, sizeof buf, "threshold %.3f\n", r.threshold);
  os << buf;
  return os.str();
}

template Tensor4<float> binarize<float>(const Tensor4<float>&, double);
template Tensor4<double> binarize<double>(const Tensor4<double>&, double);
template ConfusionCounts confusion<float>(const Tensor4<float>&, const Tensor4<float>&);
template ConfusionCounts confusion<double>(const Tensor4<double>&, const Tensor4<double>&);
template double mae<float>(const Tensor4<float>&, const Tensor4<float>&);
template double mae<double>(const Tensor4<double>&, const Tensor4<double>&);

}  // namespace mseg
