#include "xco2/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "xco2/common.hpp"

namespace xco2::evalmetrics {

PosteriorSummary PosteriorSummary::from_samples(std::uint64_t id, std::vector<double> samples,
                                                double truth) {
  require(!samples.empty(), ErrorKind::validation, "posterior summary: no samples");
  PosteriorSummary s;
  s.id = id;
  s.truth = truth;
  for (double v : samples) s.mean += v;
  s.mean /= static_cast<double>(samples.size());
  if (samples.size() > 1) {
    double ss = 0.0;
    for (double v : samples) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(samples.size() - 1));
  }
  s.samples = std::move(samples);
  return s;
}

namespace {
void check_pair(std::span<const double> a, std::span<const double> b, std::size_t min_n,
                const char* what) {
  require(a.size() == b.size(), ErrorKind::validation, std::string(what) + ": length mismatch");
  require(a.size() >= min_n, ErrorKind::validation,
          std::string(what) + ": need at least " + std::to_string(min_n) + " values");
}
}  // namespace

double rmse(std::span<const double> p, std::span<const double> t) {
  check_pair(p, t, 1, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - t[i]) * (p[i] - t[i]);
  return std::sqrt(s / static_cast<double>(p.size()));
}

BiasStats bias_stats(std::span<const double> p, std::span<const double> t) {
  check_pair(p, t, 2, "bias_stats");
  BiasStats b;
  for (std::size_t i = 0; i < p.size(); ++i) b.mean += p[i] - t[i];
  b.mean /= static_cast<double>(p.size());
  double ss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) ss += (p[i] - t[i] - b.mean) * (p[i] - t[i] - b.mean);
  b.std = std::sqrt(ss / static_cast<double>(p.size() - 1));
  return b;
}

double normal_quantile(double p) {
  require(p > 0.0 && p < 1.0, ErrorKind::validation, "normal_quantile: p must be in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double lo = 0.02425, hi = 1.0 - lo;
  double x;
  if (p < lo) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= hi) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

double two_sided_z(double p) {
  require(p > 0.0 && p < 1.0, ErrorKind::validation, "coverage must be in (0, 1)");
  return normal_quantile(0.5 * (1.0 + p));
}

std::pair<double, double> gaussian_interval(const PosteriorSummary& s, double coverage) {
  require(s.std >= 0.0 && std::isfinite(s.mean), ErrorKind::validation,
          "gaussian_interval: invalid summary");
  const double h = two_sided_z(coverage) * s.std;
  return {s.mean - h, s.mean + h};
}

std::vector<double> coverage_grid() {
  std::vector<double> g(99);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(i + 1) / 100.0;
  return g;
}

CalibrationCurve calibration_curve(std::span<const PosteriorSummary> summaries) {
  require(!summaries.empty(), ErrorKind::validation, "calibration_curve: no summaries");
  CalibrationCurve c;
  c.expected = coverage_grid();
  c.observed.reserve(c.expected.size());
  for (double p : c.expected) {
    const double z = two_sided_z(p);
    std::size_t inside = 0;
    for (const auto& s : summaries)
      if (std::abs(s.truth - s.mean) <= z * s.std) ++inside;
    c.observed.push_back(static_cast<double>(inside) / static_cast<double>(summaries.size()));
  }
  return c;
}

double miscalibration_area(const CalibrationCurve& c) {
  require(c.expected.size() == c.observed.size() && c.expected.size() >= 2, ErrorKind::validation,
          "miscalibration_area: malformed curve");
  double area = 0.0;
  for (std::size_t i = 1; i < c.expected.size(); ++i) {
    const double a = std::abs(c.observed[i - 1] - c.expected[i - 1]);
    const double b = std::abs(c.observed[i] - c.expected[i]);
    area += 0.5 * (a + b) * (c.expected[i] - c.expected[i - 1]);
  }
  return area / (c.expected.back() - c.expected.front());
}

double silverman_bandwidth(std::span<const double> x) {
  require(x.size() >= 2, ErrorKind::validation, "bandwidth: need at least two samples");
  std::vector<double> v(x.begin(), x.end());
  std::sort(v.begin(), v.end());
  double m = 0.0;
  for (double s : v) m += s;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double s : v) ss += (s - m) * (s - m);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    const double f = pos - static_cast<double>(i);
    return i + 1 < v.size() ? v[i] * (1 - f) + v[i + 1] * f : v[i];
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = sd;
  return 0.9 * spread * std::pow(static_cast<double>(v.size()), -0.2);
}

DensityEstimate density_estimate(std::span<const double> x, const DensityOptions& opt) {
  require(x.size() >= 2, ErrorKind::validation, "density_estimate: need at least two samples");
  require(opt.bins >= 1 && opt.grid_points >= 3, ErrorKind::validation,
          "density_estimate: bins >= 1 and grid_points >= 3 required");
  for (double v : x) require(std::isfinite(v), ErrorKind::validation, "density_estimate: non-finite sample");
  const auto [mn_it, mx_it] = std::minmax_element(x.begin(), x.end());
  const double mn = *mn_it, mx = *mx_it;
  DensityEstimate d;

  double lo = mn, hi = mx;
  if (opt.range) std::tie(lo, hi) = *opt.range;
  if (!(hi > lo)) {  // all-equal samples: a single spike of unit mass
    const double half = 0.5 * std::max(1e-6, 1e-6 * std::abs(lo));
    lo -= half;
    hi += half;
  }
  const double width = (hi - lo) / static_cast<double>(opt.bins);
  for (std::size_t i = 0; i <= opt.bins; ++i) d.bin_edges.push_back(lo + width * static_cast<double>(i));
  d.histogram.assign(opt.bins, 0.0);
  std::size_t in_range = 0;
  for (double v : x) {
    if (v < lo || v > hi) continue;
    auto b = static_cast<std::size_t>((v - lo) / width);
    if (b >= opt.bins) b = opt.bins - 1;
    d.histogram[b] += 1.0;
    ++in_range;
  }
  if (in_range)
    for (auto& h : d.histogram) h /= static_cast<double>(in_range) * width;

  const double floor_bw = 1e-3 * std::max(1.0, std::abs(mn));
  d.bandwidth = opt.bandwidth ? *opt.bandwidth : silverman_bandwidth(x);
  require(std::isfinite(d.bandwidth) && d.bandwidth >= 0.0, ErrorKind::validation,
          "density_estimate: invalid bandwidth");
  d.bandwidth = std::max(d.bandwidth, floor_bw);
  const double g_lo = mn - 4.0 * d.bandwidth, g_hi = mx + 4.0 * d.bandwidth;
  const double step = (g_hi - g_lo) / static_cast<double>(opt.grid_points - 1);
  d.grid.resize(opt.grid_points);
  d.kde.assign(opt.grid_points, 0.0);
  for (std::size_t i = 0; i < opt.grid_points; ++i) d.grid[i] = g_lo + step * static_cast<double>(i);
  // Kernel mass lies within +-8 bandwidths; visit only those grid points.
  const double norm = 1.0 / (static_cast<double>(x.size()) * d.bandwidth * std::sqrt(2.0 * std::numbers::pi));
  const double reach = 8.0 * d.bandwidth;
  for (double v : x) {
    const auto first = static_cast<std::ptrdiff_t>(std::ceil((v - reach - g_lo) / step));
    const auto last = static_cast<std::ptrdiff_t>(std::floor((v + reach - g_lo) / step));
    for (std::ptrdiff_t i = std::max<std::ptrdiff_t>(first, 0);
         i <= std::min<std::ptrdiff_t>(last, static_cast<std::ptrdiff_t>(opt.grid_points) - 1); ++i) {
      const double u = (d.grid[static_cast<std::size_t>(i)] - v) / d.bandwidth;
      d.kde[static_cast<std::size_t>(i)] += std::exp(-0.5 * u * u);
    }
  }
  for (auto& k : d.kde) k *= norm;
  // a flat top of equal values counts once if both outer neighbours are lower
  for (std::size_t i = 1; i + 1 < d.kde.size();) {
    std::size_t j = i;
    while (j + 1 < d.kde.size() && d.kde[j + 1] == d.kde[i]) ++j;
    if (j + 1 < d.kde.size() && d.kde[i] > d.kde[i - 1] && d.kde[i] > d.kde[j + 1]) ++d.modes;
    i = j + 1;
  }
  return d;
}

nlohmann::json MetricsReport::to_json() const {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"method", method},
          {"n", n},
          {"rmse", num(rmse)},
          {"bias_mean", num(bias_mean)},
          {"bias_std", num(bias_std)},
          {"miscalibration_area", num(miscalibration_area)}};
}

std::string MetricsReport::csv_header() { return "method,n,rmse,bias_mean,bias_std,miscalibration_area"; }

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os.precision(10);
  os << method << ',' << n << ',' << rmse << ',' << bias_mean << ',' << bias_std << ',';
  if (std::isfinite(miscalibration_area)) os << miscalibration_area;
  return os.str();
}

MetricsReport make_report(const std::string& method, std::span<const PosteriorSummary> s) {
  require(!s.empty(), ErrorKind::validation, "report: no summaries");
  std::vector<double> p, t;
  bool has_spread = false;
  for (const auto& x : s) {
    p.push_back(x.mean);
    t.push_back(x.truth);
    has_spread = has_spread || x.std > 0.0;
  }
  MetricsReport r;
  r.method = method;
  r.n = s.size();
  r.rmse = rmse(p, t);
  if (s.size() >= 2) {
    const auto b = bias_stats(p, t);
    r.bias_mean = b.mean;
    r.bias_std = b.std;
  } else {
    r.bias_mean = p[0] - t[0];
    r.bias_std = std::numeric_limits<double>::quiet_NaN();
  }
  r.miscalibration_area = has_spread ? miscalibration_area(calibration_curve(s))
                                     : std::numeric_limits<double>::quiet_NaN();
  return r;
}

std::string calibration_csv(const CalibrationCurve& c) {
  std::ostringstream os;
  os << "p,observed\n";
  for (std::size_t i = 0; i < c.expected.size(); ++i) os << c.expected[i] << ',' << c.observed[i] << '\n';
  return os.str();
}

namespace {

constexpr double kW = 480, kH = 360, kPad = 48;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string svg_open(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kW / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n"
     << "<rect x=\"" << kPad << "\" y=\"" << kPad << "\" width=\"" << kW - 2 * kPad << "\" height=\""
     << kH - 2 * kPad << "\" fill=\"none\" stroke=\"black\"/>\n";
  return os.str();
}

std::string polyline(const std::vector<double>& xs, const std::vector<double>& ys, double x0,
                     double x1, double y0, double y1, const char* color, const char* extra = "") {
  std::ostringstream os;
  os.precision(6);
  os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" " << extra << " points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double px = kPad + (xs[i] - x0) / (x1 - x0) * (kW - 2 * kPad);
    const double py = kH - kPad - (ys[i] - y0) / (y1 - y0) * (kH - 2 * kPad);
    os << px << ',' << py << ' ';
  }
  os << "\"/>\n";
  return os.str();
}

}  // namespace

std::string calibration_svg(const std::vector<std::pair<std::string, CalibrationCurve>>& curves) {
  std::string s = svg_open("Calibration");
  s += polyline({0, 1}, {0, 1}, 0, 1, 0, 1, "#888888", "stroke-dasharray=\"4 3\"");
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* col = kColors[i % std::size(kColors)];
    s += polyline(curves[i].second.expected, curves[i].second.observed, 0, 1, 0, 1, col);
    std::ostringstream os;
    os << "<text x=\"" << kPad + 8 << "\" y=\"" << kPad + 16 + 14 * static_cast<double>(i) << "\" fill=\""
       << col << "\">" << curves[i].first << "</text>\n";
    s += os.str();
  }
  s += "<text x=\"" + std::to_string(kW / 2) + "\" y=\"" + std::to_string(kH - 14) +
       "\" text-anchor=\"middle\">expected coverage</text>\n</svg>\n";
  return s;
}

std::string density_svg(const DensityEstimate& d, const std::string& title, std::optional<double> truth) {
  std::string s = svg_open(title);
  const double x0 = std::min(d.grid.front(), d.bin_edges.front());
  const double x1 = std::max(d.grid.back(), d.bin_edges.back());
  double ymax = 0.0;
  for (double v : d.kde) ymax = std::max(ymax, v);
  for (double v : d.histogram) ymax = std::max(ymax, v);
  ymax = ymax > 0 ? ymax * 1.1 : 1.0;
  std::ostringstream os;
  os.precision(6);
  for (std::size_t i = 0; i < d.histogram.size(); ++i) {
    const double px = kPad + (d.bin_edges[i] - x0) / (x1 - x0) * (kW - 2 * kPad);
    const double pw = (d.bin_edges[i + 1] - d.bin_edges[i]) / (x1 - x0) * (kW - 2 * kPad);
    const double ph = d.histogram[i] / ymax * (kH - 2 * kPad);
    os << "<rect x=\"" << px << "\" y=\"" << kH - kPad - ph << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"#c6dbef\" stroke=\"#6baed6\"/>\n";
  }
  s += os.str();
  s += polyline(d.grid, d.kde, x0, x1, 0, ymax, kColors[0]);
  if (truth) s += polyline({*truth, *truth}, {0, ymax}, x0, x1, 0, ymax, kColors[1]);
  s += "</svg>\n";
  return s;
}

}  // namespace xco2::evalmetrics
