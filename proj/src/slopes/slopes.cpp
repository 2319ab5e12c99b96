#include "cfaudit/slopes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <boost/math/distributions/students_t.hpp>

#include "cfaudit/error.hpp"

namespace cfaudit::slopes {

using nlohmann::json;

namespace {

double two_sided_p(double t, double df) {
  boost::math::students_t dist(df);
  return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t))), 0.0, 1.0);
}

// Shared tail of both fits, from centered sums over `count` observations.
OlsFit finish(double count, double mean_x, double mean_y, double sxx, double sxy, double syy,
              double sse) {
  if (!(sxx > 0.0)) throw ArgumentError("regressor has zero variance");
  OlsFit fit;
  fit.df = count - 2.0;
  if (syy == 0.0) {
    fit.intercept = mean_y;
    return fit;
  }
  fit.slope = sxy / sxx;
  fit.intercept = mean_y - fit.slope * mean_x;
  if (fit.df < 1.0) return fit;
  sse = std::max(sse, 0.0);
  if (sse <= 1e-24 * syy) {
    fit.t_stat = fit.slope > 0 ? INFINITY : -INFINITY;
    fit.p_value = 0.0;
    return fit;
  }
  fit.std_error = std::sqrt(sse / fit.df / sxx);
  fit.t_stat = fit.slope / fit.std_error;
  fit.p_value = two_sided_p(fit.t_stat, fit.df);
  return fit;
}

}  // namespace

OlsFit ols_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ArgumentError("x and y differ in length");
  if (x.size() < 2) throw ArgumentError("regression needs at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  double sse = 0.0;
  if (sxx > 0.0) {
    const double b = sxy / sxx;
    const double c = my - b * mx;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = y[i] - c - b * x[i];
      sse += r * r;
    }
  }
  return finish(n, mx, my, sxx, sxy, syy, sse);
}

OlsFit ols_from_groups(std::span<const double> x, std::span<const std::size_t> weight,
                       std::span<const double> sum, std::span<const double> sum_sq) {
  if (x.size() != weight.size() || x.size() != sum.size() || x.size() != sum_sq.size()) {
    throw ArgumentError("group statistics differ in length");
  }
  double n = 0.0;
  double sx = 0.0;
  double sy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    n += static_cast<double>(weight[i]);
    sx += static_cast<double>(weight[i]) * x[i];
    sy += sum[i];
  }
  if (n < 2.0) throw ArgumentError("regression needs at least two observations");
  const double mx = sx / n;
  const double my = sy / n;
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double w = static_cast<double>(weight[i]);
    const double dx = x[i] - mx;
    sxx += w * dx * dx;
    sxy += dx * (sum[i] - w * my);
    syy += sum_sq[i] - 2.0 * my * sum[i] + w * my * my;
  }
  syy = std::max(syy, 0.0);
  const double sse = sxx > 0.0 ? syy - sxy * sxy / sxx : 0.0;
  return finish(n, mx, my, sxx, sxy, syy, sse);
}

std::string to_string(Mode mode) { return mode == Mode::kAggregate ? "aggregate" : "per-image"; }

Mode mode_from_string(const std::string& text) {
  if (text == "aggregate") return Mode::kAggregate;
  if (text == "per-image" || text == "per_image") return Mode::kPerImage;
  throw ConfigError("unknown significance mode '" + text + "'");
}

std::vector<LabelRateVector> aggregate_rates(const std::vector<JoinedRecord>& records,
                                             Outcome outcome) {
  if (records.empty()) return {};
  const std::size_t K = records.front().K;
  for (const auto& r : records) {
    if (r.K != K) {
      throw AnalysisError("series with K = " + std::to_string(r.K) + " and K = " +
                          std::to_string(K) + " in one analysis");
    }
    if (r.k < 1 || r.k > K) throw AnalysisError("grid index out of range for " + r.source_id);
  }

  struct BackendData {
    std::vector<std::optional<double>> a;
    std::set<std::string> sources;
    std::set<std::pair<std::string, std::size_t>> seen;
    std::vector<std::size_t> support;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> labels;
    std::set<std::string> ever_present;
  };
  std::map<std::string, BackendData> by_backend;

  for (const auto& r : records) {
    auto& b = by_backend[r.backend];
    if (b.a.empty()) {
      b.a.resize(K);
      b.support.assign(K, 0);
    }
    auto& slot = b.a[r.k - 1];
    if (!slot) {
      slot = r.a;
    } else if (std::fabs(*slot - r.a) > 1e-12) {
      throw AnalysisError("series disagree on the grid value at k = " + std::to_string(r.k));
    }
    if (!b.seen.emplace(r.source_id, r.k).second) continue;
    b.sources.insert(r.source_id);
    ++b.support[r.k - 1];
    for (const auto& p : r.predictions) {
      auto& [sum, sum_sq] = b.labels[p.label];
      if (sum.empty()) {
        sum.assign(K, 0.0);
        sum_sq.assign(K, 0.0);
      }
      double v = 0.0;
      if (p.present) {
        v = outcome == Outcome::kBinary ? 1.0 : p.confidence;
        b.ever_present.insert(p.label);
      }
      sum[r.k - 1] += v;
      sum_sq[r.k - 1] += v * v;
    }
  }

  std::vector<LabelRateVector> out;
  for (auto& [backend, b] : by_backend) {
    for (std::size_t k = 0; k < K; ++k) {
      if (b.support[k] == 0) {
        throw AnalysisError("backend " + backend + " has no observations at k = " +
                            std::to_string(k + 1));
      }
    }
    for (auto& [label, sums] : b.labels) {
      if (!b.ever_present.contains(label)) continue;
      LabelRateVector v;
      v.label = label;
      v.backend = backend;
      v.K = K;
      v.n = b.sources.size();
      v.support = b.support;
      v.sum = sums.first;
      v.sum_sq = sums.second;
      for (std::size_t k = 0; k < K; ++k) {
        v.a.push_back(*b.a[k]);
        v.y.push_back(v.sum[k] / static_cast<double>(v.support[k]));
      }
      out.push_back(std::move(v));
    }
  }
  return out;
}

NormalizedVector normalize(const LabelRateVector& v) {
  if (v.y.size() % 2 == 0) throw ArgumentError("normalization needs an odd number of grid points");
  NormalizedVector out;
  out.center_index = (v.y.size() + 1) / 2;
  const double yc = v.y[out.center_index - 1];
  if (yc == 0.0) {
    throw NormalizationUndefined("label '" + v.label + "' (" + v.backend +
                                 ") has zero rate at the grid center");
  }
  out.z.reserve(v.y.size());
  for (double y : v.y) out.z.push_back(y / yc);
  out.z[out.center_index - 1] = 1.0;
  return out;
}

LabelSlope slope_for(const LabelRateVector& rates, const NormalizedVector& z, Mode mode) {
  const OlsFit agg = ols_slope(rates.a, z.z);
  LabelSlope s{rates.label, rates.backend, agg.slope, agg.intercept, agg.p_value,
               rates.n,     rates.K,       mode};
  if (mode == Mode::kPerImage) {
    s.p_value = ols_from_groups(rates.a, rates.support, rates.sum, rates.sum_sq).p_value;
  }
  return s;
}

Analysis analyze(const std::vector<JoinedRecord>& records, const AnalysisOptions& options) {
  Analysis out;
  out.rates = aggregate_rates(records, options.outcome);
  for (const auto& r : out.rates) {
    try {
      out.slopes.push_back(slope_for(r, normalize(r), options.mode));
    } catch (const NormalizationUndefined&) {
      out.exclusions.push_back({r.backend, r.label, "zero rate at grid center"});
    }
  }
  return out;
}

namespace {

bool slope_order(const LabelSlope& x, const LabelSlope& y) {
  if (x.slope != y.slope) return x.slope < y.slope;
  if (x.backend != y.backend) return x.backend < y.backend;
  return x.label < y.label;
}

}  // namespace

std::vector<LabelSlope> filter_labels(std::vector<LabelSlope> slopes, double p_max,
                                      double min_abs_slope) {
  std::erase_if(slopes, [&](const LabelSlope& s) {
    return !(s.p_value < p_max && std::fabs(s.slope) > min_abs_slope);
  });
  std::sort(slopes.begin(), slopes.end(), slope_order);
  return slopes;
}

json analysis_to_json(const Analysis& analysis) {
  json rates = json::array();
  for (const auto& r : analysis.rates) {
    rates.push_back(json{{"backend", r.backend}, {"label", r.label}, {"a", r.a},
                         {"y", r.y}, {"support", r.support}, {"sum", r.sum},
                         {"sum_sq", r.sum_sq}, {"n", r.n}, {"K", r.K}});
  }
  json slopes = json::array();
  for (const auto& s : analysis.slopes) {
    slopes.push_back(json{{"backend", s.backend}, {"label", s.label}, {"slope", s.slope},
                          {"intercept", s.intercept}, {"p_value", s.p_value}, {"n", s.n},
                          {"K", s.K}, {"mode", to_string(s.mode)}});
  }
  json exclusions = json::array();
  for (const auto& e : analysis.exclusions) {
    exclusions.push_back(json{{"backend", e.backend}, {"label", e.label}, {"reason", e.reason}});
  }
  return json{{"format", "cfaudit.analysis/1"},
              {"rates", rates},
              {"slopes", slopes},
              {"exclusions", exclusions}};
}

Analysis analysis_from_json(const json& doc) {
  try {
    Analysis out;
    for (const auto& r : doc.at("rates")) {
      LabelRateVector v;
      v.backend = r.at("backend");
      v.label = r.at("label");
      v.a = r.at("a").get<std::vector<double>>();
      v.y = r.at("y").get<std::vector<double>>();
      v.support = r.at("support").get<std::vector<std::size_t>>();
      v.sum = r.at("sum").get<std::vector<double>>();
      v.sum_sq = r.at("sum_sq").get<std::vector<double>>();
      v.n = r.at("n");
      v.K = r.at("K");
      out.rates.push_back(std::move(v));
    }
    for (const auto& s : doc.at("slopes")) {
      out.slopes.push_back(LabelSlope{s.at("label"), s.at("backend"), s.at("slope"),
                                      s.at("intercept"), s.at("p_value"), s.at("n"), s.at("K"),
                                      mode_from_string(s.at("mode"))});
    }
    for (const auto& e : doc.at("exclusions")) {
      out.exclusions.push_back(Exclusion{e.at("backend"), e.at("label"), e.at("reason")});
    }
    return out;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed analysis document: ") + e.what());
  }
}

}  // namespace cfaudit::slopes
