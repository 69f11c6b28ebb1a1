#include "nowcast/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

namespace nowcast {

namespace fs = std::filesystem;
using json = nlohmann::json;

void NeumaierSum::add(double x) {
  const double t = sum_ + x;
  if (std::abs(sum_) >= std::abs(x)) {
    comp_ += (sum_ - t) + x;
  } else {
    comp_ += (x - t) + sum_;
  }
  sum_ = t;
}

void NeumaierSum::merge(const NeumaierSum& other) {
  add(other.sum_);
  add(other.comp_);
}

std::vector<std::uint8_t> binarize(std::span<const float> values, double threshold) {
  std::vector<std::uint8_t> out(values.size());
  const auto thr = static_cast<float>(threshold);
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] > thr ? 1 : 0;
  return out;
}

std::vector<std::uint8_t> binarize(const Grid2D& grid, double threshold) { return binarize(grid.values(), threshold); }

void accumulate_confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                          ConfusionCounts& counts) {
  if (pred.size() != truth.size()) {
    throw ShapeError(fmt::format("confusion: {} predicted vs {} true pixels", pred.size(), truth.size()));
  }
  std::array<std::uint64_t, 4> c{};  // index = 2*pred + truth
  for (std::size_t i = 0; i < pred.size(); ++i) ++c[std::size_t(2 * (pred[i] != 0) + (truth[i] != 0))];
  counts.tn += c[0];
  counts.fn += c[1];
  counts.fp += c[2];
  counts.tp += c[3];
}

ClassificationMetrics classification_metrics(const ConfusionCounts& k) {
  const double tp = double(k.tp), tn = double(k.tn), fp = double(k.fp), fn = double(k.fn);
  auto ratio = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
  ClassificationMetrics m;
  m.acc = ratio(tp + tn, tp + tn + fp + fn);
  m.prec = ratio(tp, tp + fp);
  m.rec = ratio(tp, tp + fn);
  m.f1 = (m.prec + m.rec) > 0.0 ? 2.0 * m.prec * m.rec / (m.prec + m.rec) : 0.0;
  m.csi = ratio(tp, tp + fn + fp);
  const double den = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
  m.mcc = ratio(tp * tn - fp * fn, den);
  return m;
}

MseReport mse_report(const std::vector<std::vector<Grid2D>>& preds, const std::vector<std::vector<Grid2D>>& targets) {
  if (preds.size() != targets.size()) {
    throw ShapeError(fmt::format("mse_report: {} predictions vs {} targets", preds.size(), targets.size()));
  }
  MseReport r;
  if (preds.empty()) return r;
  const std::size_t steps = preds.front().size();
  std::vector<NeumaierSum> sse(steps);
  std::vector<std::uint64_t> n(steps, 0);
  NeumaierSum total;
  std::uint64_t total_n = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    if (preds[s].size() != steps || targets[s].size() != steps) throw ShapeError("mse_report: step count differs");
    for (std::size_t t = 0; t < steps; ++t) {
      const Grid2D &p = preds[s][t], &g = targets[s][t];
      if (!p.congruent(g)) throw ShapeError("mse_report: frames not congruent");
      const auto a = p.values(), b = g.values();
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        sse[t].add(d * d);
        total.add(d * d);
      }
      n[t] += a.size();
      total_n += a.size();
    }
  }
  for (std::size_t t = 0; t < steps; ++t) r.per_step.push_back(n[t] ? sse[t].value() / double(n[t]) : 0.0);
  r.total = total_n ? total.value() / double(total_n) : 0.0;
  return r;
}

Evaluator::Evaluator(VariableStats rain_stats, double threshold, std::size_t steps)
    : stats_(rain_stats), threshold_(threshold), sse_(steps), sse_mm_(steps), count_(steps, 0) {
  stats_.validate();
}

void Evaluator::add(const Tensor<float>& pred, const Tensor<float>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError(fmt::format("evaluate: prediction {} vs target {}", shape_string(pred.shape()),
                                 shape_string(target.shape())));
  }
  const Dims4 d = dims4(pred.shape(), "prediction");
  if (std::size_t(d.c) != sse_.size()) {
    throw ShapeError(fmt::format("evaluate: expected {} steps, got {}", sse_.size(), d.c));
  }
  std::vector<float> pm(std::size_t(d.plane())), tm(std::size_t(d.plane()));
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t t = 0; t < d.c; ++t) {
      const float* p = pred.ptr() + (n * d.c + t) * d.plane();
      const float* g = target.ptr() + (n * d.c + t) * d.plane();
      for (std::int64_t i = 0; i < d.plane(); ++i) {
        const double e = double(p[i]) - double(g[i]);
        sse_[t].add(e * e);
        pm[i] = denormalize_value(p[i], stats_);
        tm[i] = denormalize_value(g[i], stats_);
        const double em = double(pm[i]) - double(tm[i]);
        sse_mm_[t].add(em * em);
      }
      count_[t] += std::uint64_t(d.plane());
      accumulate_confusion(binarize(pm, threshold_), binarize(tm, threshold_), counts_);
    }
  }
  samples_ += std::uint64_t(d.n);
}

void Evaluator::merge(const Evaluator& o) {
  if (o.sse_.size() != sse_.size()) throw ShapeError("evaluator step counts differ");
  for (std::size_t t = 0; t < sse_.size(); ++t) {
    sse_[t].merge(o.sse_[t]);
    sse_mm_[t].merge(o.sse_mm_[t]);
    count_[t] += o.count_[t];
  }
  counts_ += o.counts_;
  samples_ += o.samples_;
}

MetricReport Evaluator::report(const std::string& model) const {
  MetricReport r;
  r.model = model;
  r.samples = samples_;
  r.threshold = threshold_;
  NeumaierSum tot, tot_mm;
  std::uint64_t n = 0;
  for (std::size_t t = 0; t < sse_.size(); ++t) {
    r.mse_per_step.push_back(count_[t] ? sse_[t].value() / double(count_[t]) : 0.0);
    r.mse_per_step_mm.push_back(count_[t] ? sse_mm_[t].value() / double(count_[t]) : 0.0);
    tot.merge(sse_[t]);
    tot_mm.merge(sse_mm_[t]);
    n += count_[t];
  }
  r.mse_total = n ? tot.value() / double(n) : 0.0;
  r.mse_total_mm = n ? tot_mm.value() / double(n) : 0.0;
  r.counts = counts_;
  r.metrics = classification_metrics(counts_);
  return r;
}

MetricReport evaluate_model(Forecaster<float>& model, const std::vector<Sample>& samples,
                            const VariableStats& rain_stats, double threshold, std::size_t batch_size) {
  NoGradGuard guard;
  model.eval();
  Evaluator ev(rain_stats, threshold, std::size_t(model.config().out_frames));
  for (std::size_t b = 0; b < samples.size(); b += batch_size) {
    std::vector<const Sample*> ptrs;
    for (std::size_t i = b; i < std::min(samples.size(), b + batch_size); ++i) ptrs.push_back(&samples[i]);
    Batch<float> batch = make_batch<float>(ptrs);
    Var<float> out = model.forward(Var<float>(std::move(batch.rain_in)), Var<float>(std::move(batch.aux)));
    ev.add(out.value(), batch.target);
  }
  return ev.report(std::string(to_string(model.config().variant)));
}

namespace {

json report_to_json(const MetricReport& r) {
  return {{"model", r.model},
          {"samples", r.samples},
          {"threshold_mm_per_h", r.threshold},
          {"mse_total", r.mse_total},
          {"mse_per_step", r.mse_per_step},
          {"mse_total_mm2_per_h2", r.mse_total_mm},
          {"mse_per_step_mm2_per_h2", r.mse_per_step_mm},
          {"acc", r.metrics.acc},
          {"prec", r.metrics.prec},
          {"rec", r.metrics.rec},
          {"f1", r.metrics.f1},
          {"csi", r.metrics.csi},
          {"mcc", r.metrics.mcc},
          {"counts", {{"tp", r.counts.tp}, {"tn", r.counts.tn}, {"fp", r.counts.fp}, {"fn", r.counts.fn}}}};
}

}  // namespace

std::string to_json_string(const MetricReport& r) { return report_to_json(r).dump(2); }

MetricReport metric_report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    MetricReport r;
    r.model = j.at("model").get<std::string>();
    r.samples = j.at("samples").get<std::uint64_t>();
    r.threshold = j.at("threshold_mm_per_h").get<double>();
    r.mse_total = j.at("mse_total").get<double>();
    r.mse_per_step = j.at("mse_per_step").get<std::vector<double>>();
    r.mse_total_mm = j.at("mse_total_mm2_per_h2").get<double>();
    r.mse_per_step_mm = j.at("mse_per_step_mm2_per_h2").get<std::vector<double>>();
    r.metrics = {j.at("acc").get<double>(), j.at("prec").get<double>(), j.at("rec").get<double>(),
                 j.at("f1").get<double>(),  j.at("csi").get<double>(),  j.at("mcc").get<double>()};
    const auto& c = j.at("counts");
    r.counts = {c.at("tp").get<std::uint64_t>(), c.at("tn").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(),
                c.at("fn").get<std::uint64_t>()};
    return r;
  } catch (const json::exception& e) {
    throw CorruptData(fmt::format("malformed metrics JSON ({})", e.what()));
  }
}

void write_metrics_json(const fs::path& file, const MetricReport& r) {
  std::ofstream out(file, std::ios::trunc);
  out << to_json_string(r) << "\n";
  if (!out) throw InvalidInput(fmt::format("cannot write {}", file.string()));
}

MetricReport read_metrics_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw InvalidInput(fmt::format("cannot read {}", file.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return metric_report_from_json(ss.str());
  } catch (const CorruptData& e) {
    throw CorruptData(fmt::format("{}: {}", file.string(), e.what()));
  }
}

void write_per_step_csv(const fs::path& file, const MetricReport& r) {
  std::ofstream out(file, std::ios::trunc);
  out << "step,mse,mse_mm2_per_h2\n";
  for (std::size_t t = 0; t < r.mse_per_step.size(); ++t) {
    out << fmt::format("{},{:.9g},{:.9g}\n", t + 1, r.mse_per_step[t], r.mse_per_step_mm[t]);
  }
  if (!out) throw InvalidInput(fmt::format("cannot write {}", file.string()));
}

std::string mse_per_step_svg(const std::vector<MetricReport>& reports) {
  constexpr double W = 640, H = 420, L = 70, R = 170, T = 30, B = 60;
  static constexpr const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  std::size_t steps = 1;
  double ymax = 0.0;
  for (const auto& r : reports) {
    steps = std::max(steps, r.mse_per_step.size());
    for (double v : r.mse_per_step) ymax = std::max(ymax, v);
  }
  if (!(ymax > 0.0)) ymax = 1.0;
  ymax *= 1.1;
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](std::size_t t) { return L + (steps > 1 ? pw * double(t) / double(steps - 1) : pw / 2); };
  auto py = [&](double v) { return T + ph * (1.0 - v / ymax); };

  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" "
      "font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      W, H);
  s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", L, T + ph, L + pw, T + ph);
  s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", L, T, L, T + ph);
  for (std::size_t t = 0; t < steps; ++t) {
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", px(t), T + ph + 18,
                     t + 1);
  }
  for (int k = 0; k <= 4; ++k) {
    const double v = ymax * k / 4.0;
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.3g}</text>\n", L - 6, py(v) + 4, v);
    s += fmt::format("<line x1=\"{}\" y1=\"{:.1f}\" x2=\"{}\" y2=\"{:.1f}\" stroke=\"#ddd\"/>\n", L, py(v), L + pw,
                     py(v));
  }
  s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">Lead time (h)</text>\n", L + pw / 2,
                   H - 15);
  s += fmt::format("<text x=\"15\" y=\"{:.1f}\" transform=\"rotate(-90 15 {:.1f})\" text-anchor=\"middle\">MSE</text>\n",
                   T + ph / 2, T + ph / 2);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    const char* color = kColors[i % 6];
    std::string pts;
    for (std::size_t t = 0; t < r.mse_per_step.size(); ++t) {
      pts += fmt::format("{:.1f},{:.1f} ", px(t), py(r.mse_per_step[t]));
    }
    s += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n", color, pts);
    for (std::size_t t = 0; t < r.mse_per_step.size(); ++t) {
      s += fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"3\" fill=\"{}\"/>\n", px(t), py(r.mse_per_step[t]),
                       color);
    }
    const double ly = T + 10 + 18 * double(i);
    s += fmt::format("<line x1=\"{}\" y1=\"{:.1f}\" x2=\"{}\" y2=\"{:.1f}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                     L + pw + 15, ly, L + pw + 35, ly, color);
    s += fmt::format("<text x=\"{}\" y=\"{:.1f}\">{}</text>\n", L + pw + 40, ly + 4, r.model);
  }
  s += "</svg>\n";
  return s;
}

void write_mse_svg(const fs::path& file, const std::vector<MetricReport>& reports) {
  std::ofstream out(file, std::ios::trunc);
  out << mse_per_step_svg(reports);
  if (!out) throw InvalidInput(fmt::format("cannot write {}", file.string()));
}

std::string comparison_table(const std::vector<MetricReport>& reports) {
  struct Column {
    const char* name;
    bool lower_better;
    double (*get)(const MetricReport&);
  };
  static const Column cols[] = {
      {"MSE", true, [](const MetricReport& r) { return r.mse_total; }},
      {"ACC", false, [](const MetricReport& r) { return r.metrics.acc; }},
      {"PREC", false, [](const MetricReport& r) { return r.metrics.prec; }},
      {"REC", false, [](const MetricReport& r) { return r.metrics.rec; }},
      {"F1", false, [](const MetricReport& r) { return r.metrics.f1; }},
      {"CSI", false, [](const MetricReport& r) { return r.metrics.csi; }},
      {"MCC", false, [](const MetricReport& r) { return r.metrics.mcc; }},
  };
  std::string s = "| Model |";
  std::string rule = "|---|";
  for (const auto& c : cols) {
    s += fmt::format(" {} |", c.name);
    rule += "---:|";
  }
  s += "\n" + rule + "\n";
  // Rank distinct values so ties share a marking.
  std::vector<std::array<int, 7>> rank(reports.size());
  for (std::size_t c = 0; c < 7; ++c) {
    std::vector<double> vals;
    for (const auto& r : reports) vals.push_back(cols[c].get(r));
    std::vector<double> uniq = vals;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    if (!cols[c].lower_better) std::reverse(uniq.begin(), uniq.end());
    for (std::size_t i = 0; i < reports.size(); ++i) {
      rank[i][c] = int(std::find(uniq.begin(), uniq.end(), vals[i]) - uniq.begin());
    }
  }
  for (std::size_t i = 0; i < reports.size(); ++i) {
    s += fmt::format("| {} |", reports[i].model);
    for (std::size_t c = 0; c < 7; ++c) {
      const std::string v = fmt::format("{:.4f}", cols[c].get(reports[i]));
      if (reports.size() > 1 && rank[i][c] == 0) {
        s += fmt::format(" **{}** |", v);
      } else if (reports.size() > 2 && rank[i][c] == 1) {
        s += fmt::format(" <u>{}</u> |", v);
      } else {
        s += fmt::format(" {} |", v);
      }
    }
    s += "\n";
  }
  return s;
}

}  // namespace nowcast
