#include "synstitch/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "synstitch/parallel.hpp"

namespace synstitch {

double mse(const Image2D& a, const Image2D& b) {
  require_same_shape(a, b, "mse");
  if (a.empty()) throw ShapeMismatch("mse of empty images");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.pixels()[i]) - b.pixels()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double mse(const Image2D& a, const Image2D& b, const BinaryMask& mask) {
  require_same_shape(a, b, "mse");
  require_same_shape(a, mask, "mse");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask.pixels()[i]) continue;
    const double d = static_cast<double>(a.pixels()[i]) - b.pixels()[i];
    acc += d * d;
    ++n;
  }
  if (n == 0) throw UndefinedMetric("mse over an empty mask");
  return acc / static_cast<double>(n);
}

double ssim(const Image2D& a, const Image2D& b, const SsimOptions& o) {
  require_same_shape(a, b, "ssim");
  if (o.window < 1 || o.window % 2 == 0) throw InvalidParameter("ssim window must be odd and positive");
  const int h = a.height();
  const int w = a.width();
  const int k = o.window;
  if (h < k || w < k) throw ShapeMismatch("image smaller than ssim window");
  // Summed-area tables of a, b, a^2, b^2, ab.
  const int sw = w + 1;
  std::vector<double> sa((h + 1) * sw, 0.0), sb(sa), saa(sa), sbb(sa), sab(sa);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double va = a(y, x);
      const double vb = b(y, x);
      const int i = (y + 1) * sw + (x + 1);
      const int up = y * sw + (x + 1);
      const int left = (y + 1) * sw + x;
      const int diag = y * sw + x;
      sa[i] = va + sa[up] + sa[left] - sa[diag];
      sb[i] = vb + sb[up] + sb[left] - sb[diag];
      saa[i] = va * va + saa[up] + saa[left] - saa[diag];
      sbb[i] = vb * vb + sbb[up] + sbb[left] - sbb[diag];
      sab[i] = va * vb + sab[up] + sab[left] - sab[diag];
    }
  }
  auto box = [&](const std::vector<double>& s, int y, int x) {
    return s[(y + k) * sw + (x + k)] - s[y * sw + (x + k)] - s[(y + k) * sw + x] + s[y * sw + x];
  };
  const double n = static_cast<double>(k) * k;
  double total = 0.0;
  int count = 0;
  for (int y = 0; y + k <= h; ++y) {
    for (int x = 0; x + k <= w; ++x) {
      const double ma = box(sa, y, x) / n;
      const double mb = box(sb, y, x) / n;
      const double va = std::max(box(saa, y, x) / n - ma * ma, 0.0);
      const double vb = std::max(box(sbb, y, x) / n - mb * mb, 0.0);
      const double cov = box(sab, y, x) / n - ma * mb;
      total += ((2.0 * ma * mb + o.c1) * (2.0 * cov + o.c2)) / ((ma * ma + mb * mb + o.c1) * (va + vb + o.c2));
      ++count;
    }
  }
  return total / count;
}

namespace {

double pearson(std::span<const float> a, std::span<const float> b, const std::uint8_t* mask) {
  double n = 0.0, sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask && !mask[i]) continue;
    sa += a[i];
    sb += b[i];
    n += 1.0;
  }
  if (n == 0.0) throw UndefinedMetric("ncc over an empty pixel set");
  const double ma = sa / n;
  const double mb = sb / n;
  double vaa = 0.0, vbb = 0.0, vab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask && !mask[i]) continue;
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    vaa += da * da;
    vbb += db * db;
    vab += da * db;
  }
  if (vaa <= 0.0 || vbb <= 0.0) throw UndefinedMetric("ncc undefined for zero-variance input");
  return std::clamp(vab / std::sqrt(vaa * vbb), -1.0, 1.0);
}

}  // namespace

double ncc(const Image2D& a, const Image2D& b) {
  require_same_shape(a, b, "ncc");
  return pearson(a.pixels(), b.pixels(), nullptr);
}

double ncc(const Image2D& a, const Image2D& b, const BinaryMask& mask) {
  require_same_shape(a, b, "ncc");
  require_same_shape(a, mask, "ncc");
  return pearson(a.pixels(), b.pixels(), mask.pixels().data());
}

double keypoint_rmse(std::span<const Point2> moving, std::span<const Point2> fixed_gt, const AffineTransform& estimate) {
  if (moving.empty()) throw InvalidParameter("keypoint_rmse needs at least one keypoint");
  if (moving.size() != fixed_gt.size()) throw ShapeMismatch("keypoint lists differ in length");
  double acc = 0.0;
  for (std::size_t i = 0; i < moving.size(); ++i) {
    const Point2 q = estimate.apply(moving[i]);
    const double dx = q.x - fixed_gt[i].x;
    const double dy = q.y - fixed_gt[i].y;
    acc += dx * dx + dy * dy;
  }
  return std::sqrt(acc / static_cast<double>(moving.size()));
}

namespace {

// Modified Lentz evaluation of the incomplete-beta continued fraction.
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) return h;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw InvalidParameter("incomplete_beta needs a, b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof) {
  if (!(dof > 0.0)) throw InvalidParameter("student_t_cdf needs dof > 0");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * incomplete_beta(dof / 2.0, 0.5, x);
  return t > 0.0 ? 1.0 - tail : tail;
}

TTestResult paired_t_test(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeMismatch("paired_t_test needs equal-length samples");
  const std::size_t n = x.size();
  if (n < 2) throw DegenerateInput("paired_t_test needs at least two pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - y[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0)) throw DegenerateInput("paired differences have zero variance");
  TTestResult r;
  r.dof = static_cast<int>(n - 1);
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = incomplete_beta(r.dof / 2.0, 0.5, r.dof / (r.dof + r.t * r.t));
  return r;
}

EvalRecord evaluate_pair(const Method& method, const EvalPair& pair, const AffineTransform& estimate,
                         const EvalOptions& options) {
  EvalRecord rec;
  rec.method = method.name;
  rec.pair_id = pair.id;
  const Image2D warped = warp(pair.moving, estimate, Interp::bilinear);
  if (options.masked_metrics) {
    const BinaryMask overlap = mask_and(threshold_mask(warped), threshold_mask(pair.fixed));
    rec.mse_x100 = 100.0 * mse(warped, pair.fixed, overlap);
    try {
      rec.ncc = ncc(warped, pair.fixed, overlap);
    } catch (const UndefinedMetric&) {
      rec.ncc.reset();
    }
  } else {
    rec.mse_x100 = 100.0 * mse(warped, pair.fixed);
    try {
      rec.ncc = ncc(warped, pair.fixed);
    } catch (const UndefinedMetric&) {
      rec.ncc.reset();
    }
  }
  rec.ssim = ssim(warped, pair.fixed);
  rec.kp_rmse = keypoint_rmse(pair.keypoints_moving, pair.keypoints_fixed, estimate);
  return rec;
}

EvalOutput evaluate_all(const std::vector<Method>& methods, const std::vector<EvalPair>& pairs,
                        const EvalOptions& options) {
  const std::size_t n = methods.size() * pairs.size();
  EvalOutput out;
  out.records.resize(n);
  out.estimates.resize(n);
  parallel_for(n, options.jobs, [&](std::size_t idx) {
    const Method& method = methods[idx / pairs.size()];
    const EvalPair& pair = pairs[idx % pairs.size()];
    const Point2 center = image_center(pair.moving.height(), pair.moving.width());
    try {
      const AffineTransform estimate = method.register_pair(pair.moving, pair.fixed);
      out.records[idx] = evaluate_pair(method, pair, estimate, options);
      out.estimates[idx] = estimate;
    } catch (const std::exception& e) {
      EvalRecord rec;
      rec.method = method.name;
      rec.pair_id = pair.id;
      rec.ok = false;
      rec.error = e.what();
      out.records[idx] = rec;
      out.estimates[idx] = AffineTransform::identity(center);
    }
  });
  return out;
}

namespace {

enum class Better { lower, higher };

struct MetricAccess {
  const char* name;
  Better better;
  std::function<std::optional<double>(const EvalRecord&)> get;
  MetricSummary MethodSummary::*slot;
};

const std::vector<MetricAccess>& metric_table() {
  static const std::vector<MetricAccess> table = {
      {"MSE(x100)", Better::lower, [](const EvalRecord& r) { return std::optional<double>(r.mse_x100); },
       &MethodSummary::mse_x100},
      {"SSIM", Better::higher, [](const EvalRecord& r) { return std::optional<double>(r.ssim); }, &MethodSummary::ssim},
      {"NCC", Better::higher, [](const EvalRecord& r) { return r.ncc; }, &MethodSummary::ncc},
      {"RMSE", Better::lower, [](const EvalRecord& r) { return std::optional<double>(r.kp_rmse); },
       &MethodSummary::kp_rmse},
  };
  return table;
}

}  // namespace

std::vector<MethodSummary> summarize(const std::vector<EvalRecord>& records, const std::vector<Method>& methods) {
  // method -> pair_id -> record
  std::map<std::string, std::map<std::string, const EvalRecord*>> by_method;
  for (const auto& r : records) by_method[r.method][r.pair_id] = &r;

  std::vector<MethodSummary> out;
  for (const auto& m : methods) {
    MethodSummary s;
    s.method = m.name;
    s.baseline = m.baseline;
    const auto& recs = by_method[m.name];
    for (const auto& [id, r] : recs) {
      if (!r->ok) ++s.failures;
      else if (!r->ncc) ++s.missing_ncc;
    }
    for (const auto& metric : metric_table()) {
      std::vector<double> values;
      for (const auto& [id, r] : recs) {
        if (!r->ok) continue;
        if (auto v = metric.get(*r)) values.push_back(*v);
      }
      MetricSummary& ms = s.*metric.slot;
      ms.count = static_cast<int>(values.size());
      if (!values.empty()) {
        ms.mean = std::accumulate(values.begin(), values.end(), 0.0) / values.size();
        double ss = 0.0;
        for (double v : values) ss += (v - ms.mean) * (v - ms.mean);
        ms.std = values.size() > 1 ? std::sqrt(ss / (values.size() - 1)) : 0.0;
      }
    }
    out.push_back(std::move(s));
  }

  // Significance: a non-baseline method is marked when it beats every baseline
  // with p < 0.05 on the pairs both methods completed.
  for (auto& s : out) {
    if (s.baseline) continue;
    for (const auto& metric : metric_table()) {
      bool all_significant = false;
      for (const auto& b : out) {
        if (!b.baseline) continue;
        std::vector<double> xs, ys;
        for (const auto& [id, r] : by_method[s.method]) {
          auto it = by_method[b.method].find(id);
          if (it == by_method[b.method].end() || !r->ok || !it->second->ok) continue;
          auto x = metric.get(*r);
          auto y = metric.get(*it->second);
          if (!x || !y) continue;
          xs.push_back(*x);
          ys.push_back(*y);
        }
        bool sig = false;
        try {
          const TTestResult t = paired_t_test(xs, ys);
          const bool direction = metric.better == Better::lower ? t.t < 0.0 : t.t > 0.0;
          sig = direction && t.p < 0.05;
        } catch (const Error&) {
          sig = false;
        }
        if (!sig) {
          all_significant = false;
          break;
        }
        all_significant = true;
      }
      (s.*metric.slot).significant = all_significant;
    }
  }
  return out;
}

namespace {

std::string format_number(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else if (c == '\n') out += ' ';
    else out += c;
  }
  return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

constexpr const char* kCsvHeader = "method,pair_id,status,error,mse_x100,ssim,ncc,kp_rmse";

}  // namespace

void write_results_csv(const std::filesystem::path& path, const std::vector<EvalRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  os << kCsvHeader << "\n";
  for (const auto& r : records) {
    os << csv_escape(r.method) << ',' << csv_escape(r.pair_id) << ',' << (r.ok ? "ok" : "failed") << ','
       << csv_escape(r.error) << ',';
    if (r.ok) {
      os << format_number(r.mse_x100) << ',' << format_number(r.ssim) << ','
         << (r.ncc ? format_number(*r.ncc) : std::string()) << ',' << format_number(r.kp_rmse);
    } else {
      os << ",,,";
    }
    os << "\n";
  }
}

std::vector<EvalRecord> read_results_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifact("cannot read results: " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != kCsvHeader) throw ValidationError("unexpected results.csv header in " + path.string());
  std::vector<EvalRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = csv_split(line);
    if (f.size() != 8) throw ValidationError("malformed results.csv row: " + line);
    EvalRecord r;
    r.method = f[0];
    r.pair_id = f[1];
    r.ok = f[2] == "ok";
    r.error = f[3];
    if (r.ok) {
      r.mse_x100 = std::stod(f[4]);
      r.ssim = std::stod(f[5]);
      if (!f[6].empty()) r.ncc = std::stod(f[6]);
      r.kp_rmse = std::stod(f[7]);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string summary_markdown(const std::vector<MethodSummary>& summaries) {
  std::ostringstream os;
  os << "| Metric |";
  for (const auto& s : summaries) os << ' ' << s.method << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < summaries.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& metric : metric_table()) {
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t i = 0; i < summaries.size(); ++i) {
      const auto& ms = summaries[i].*metric.slot;
      if (ms.count > 0) ranked.emplace_back(metric.better == Better::lower ? ms.mean : -ms.mean, i);
    }
    std::sort(ranked.begin(), ranked.end());
    os << "| " << metric.name << (metric.better == Better::lower ? " ↓" : " ↑") << " |";
    for (std::size_t i = 0; i < summaries.size(); ++i) {
      const auto& ms = summaries[i].*metric.slot;
      if (ms.count == 0) {
        os << " n/a |";
        continue;
      }
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", ms.mean, ms.std);
      std::string cell = buf;
      if (ms.significant) cell += "*";
      if (!ranked.empty() && ranked[0].second == i) cell = "**" + cell + "**";
      else if (ranked.size() > 1 && ranked[1].second == i) cell = "<u>" + cell + "</u>";
      os << ' ' << cell << " |";
    }
    os << "\n";
  }
  os << "\nFailures / undefined NCC per method:";
  for (const auto& s : summaries) os << ' ' << s.method << "=" << s.failures << "/" << s.missing_ncc;
  os << "\n\n**Bold**: best, <u>underline</u>: second best, *: better than every baseline (paired t-test, p < 0.05).\n";
  return os.str();
}

}  // namespace synstitch
