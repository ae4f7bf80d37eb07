#include "rhpo/analysis.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "rhpo/distributions.h"
#include "rhpo/errors.h"

namespace rhpo {

namespace {

namespace fs = std::filesystem;

Tensor floor_normalize_rows(const Tensor& counts) {
  Tensor p(counts.rows(), counts.cols(), 0.0);
  for (int r = 0; r < counts.rows(); ++r) {
    double total = 0.0;
    for (int c = 0; c < counts.cols(); ++c) total += counts.at(r, c) + kProbFloor;
    for (int c = 0; c < counts.cols(); ++c)
      p.at(r, c) = (counts.at(r, c) + kProbFloor) / total;
  }
  return p;
}

Categorical row_categorical(const Tensor& probs, int r) {
  Categorical c;
  c.logits = Tensor(1, probs.cols(), 0.0);
  for (int j = 0; j < probs.cols(); ++j) c.logits.at(0, j) = std::log(probs.at(r, j));
  return c;
}

Tensor pairwise_bhattacharyya(const Tensor& probs) {
  const int n = probs.rows();
  Tensor d(n, n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double v = bhattacharyya(row_categorical(probs, i), row_categorical(probs, j));
      d.at(i, j) = v;
      d.at(j, i) = v;
    }
  return d;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

void write_matrix_csv(const std::string& path, const Tensor& m,
                      const std::vector<std::string>& row_labels,
                      const std::vector<std::string>& col_labels) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write '" + path + "'");
  out << "";
  for (const auto& c : col_labels) out << ',' << c;
  out << '\n';
  for (int r = 0; r < m.rows(); ++r) {
    out << row_labels.at(r);
    for (int c = 0; c < m.cols(); ++c) out << ',' << fmt(m.at(r, c));
    out << '\n';
  }
}

const char* kPalette[8] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                           "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '<') out += "&lt;";
    else if (ch == '>') out += "&gt;";
    else if (ch == '&') out += "&amp;";
    else out += ch;
  }
  return out;
}

}  // namespace

SimilarityReport analyze_similarity(const TrainState& ts, Env& env, int episodes_per_task,
                                    Rng& rng) {
  if (!ts.hier) throw ContractError("similarity analysis needs the hierarchical policy");
  if (episodes_per_task < 1) throw ContractError("episodes_per_task must be >= 1");
  const int M = ts.hier->config().num_components;
  const int tasks = static_cast<int>(ts.active.size());
  const auto names = env.task_names();

  SimilarityReport rep;
  for (int t : ts.active)
    rep.task_names.push_back(t < static_cast<int>(names.size()) ? names[t]
                                                                : "task" + std::to_string(t));

  FastCtx cx(ts.store);
  const auto& pcfg = ts.hier->config();
  Tensor counts(tasks, M, 0.0);
  std::vector<Tensor> probes;  // states for the Gaussian overlap probe

  for (int ti = 0; ti < tasks; ++ti) {
    const int task = ts.active[ti];
    for (int e = 0; e < episodes_per_task; ++e) {
      Tensor s = env.reset(rng);
      for (int t = 0; t < env.episode_steps(); ++t) {
        MixtureGaussian m = ts.hier->distribution(cx, s, task);
        auto [raw, comp] = sample(m, rng);
        counts.at(ti, comp) += 1.0;
        if (t % 97 == 0 && probes.size() < 64) probes.push_back(s);
        s = env.step(clip_action(raw, pcfg.action_low, pcfg.action_high)).observation;
      }
    }
  }

  rep.task_component = floor_normalize_rows(counts);
  Tensor countsT(M, tasks, 0.0);
  for (int r = 0; r < tasks; ++r)
    for (int c = 0; c < M; ++c) countsT.at(c, r) = counts.at(r, c);
  rep.component_task = floor_normalize_rows(countsT);
  rep.task_distance = pairwise_bhattacharyya(rep.task_component);
  rep.component_distance = pairwise_bhattacharyya(rep.component_task);

  rep.gaussian_distance = Tensor(M, M, 0.0);
  for (const auto& s : probes) {
    MixtureGaussian m = ts.hier->distribution(cx, s, ts.active[0]);
    for (int i = 0; i < M; ++i)
      for (int j = i + 1; j < M; ++j) {
        const double v = bhattacharyya_gaussian(m.components[i], m.components[j]);
        rep.gaussian_distance.at(i, j) += v;
        rep.gaussian_distance.at(j, i) += v;
      }
  }
  if (!probes.empty())
    for (auto& v : rep.gaussian_distance.raw()) v /= static_cast<double>(probes.size());
  return rep;
}

void write_similarity(const SimilarityReport& rep, const std::string& dir) {
  fs::create_directories(dir);
  const int M = rep.task_component.cols();
  std::vector<std::string> comps;
  for (int j = 0; j < M; ++j) comps.push_back("comp" + std::to_string(j));

  write_matrix_csv(dir + "/task_component.csv", rep.task_component, rep.task_names, comps);
  write_matrix_csv(dir + "/component_task.csv", rep.component_task, comps, rep.task_names);
  write_matrix_csv(dir + "/task_distance.csv", rep.task_distance, rep.task_names,
                   rep.task_names);
  write_matrix_csv(dir + "/component_distance.csv", rep.component_distance, comps, comps);
  write_matrix_csv(dir + "/gaussian_distance.csv", rep.gaussian_distance, comps, comps);

  write_heatmap_svg(dir + "/task_component.svg", rep.task_component, rep.task_names, comps,
                    "component usage per task");
  write_heatmap_svg(dir + "/task_distance.svg", rep.task_distance, rep.task_names,
                    rep.task_names, "task usage distance");
  write_heatmap_svg(dir + "/component_distance.svg", rep.component_distance, comps, comps,
                    "component activation distance");
  write_heatmap_svg(dir + "/gaussian_distance.svg", rep.gaussian_distance, comps, comps,
                    "component Gaussian distance");
}

std::map<int, std::vector<CurveBin>> binned_task_returns(
    const std::vector<std::vector<MetricsRecord>>& per_seed, int bins) {
  if (bins < 1) throw ContractError("bins must be >= 1");
  std::map<int, std::vector<CurveBin>> out;

  std::int64_t max_ep = 0;
  int tasks = 0;
  for (const auto& recs : per_seed)
    for (const auto& r : recs)
      if (r.kind == "episode") {
        max_ep = std::max(max_ep, r.actor_episodes);
        tasks = std::max(tasks, static_cast<int>(r.task_returns.size()));
      }
  if (max_ep == 0 || tasks == 0) return out;
  const double width = static_cast<double>(max_ep) / bins;

  for (int task = 0; task < tasks; ++task) {
    std::vector<CurveBin> series(bins);
    for (int b = 0; b < bins; ++b) series[b].episodes = width * (b + 1);
    // seed means per bin
    std::vector<std::vector<double>> bin_means(bins);
    for (const auto& recs : per_seed) {
      std::vector<double> sum(bins, 0.0);
      std::vector<int> cnt(bins, 0);
      for (const auto& r : recs) {
        if (r.kind != "episode" || task >= static_cast<int>(r.task_returns.size()))
          continue;
        int b = static_cast<int>(std::ceil(r.actor_episodes / width)) - 1;
        b = std::clamp(b, 0, bins - 1);
        sum[b] += r.task_returns[task];
        ++cnt[b];
      }
      for (int b = 0; b < bins; ++b)
        if (cnt[b] > 0) bin_means[b].push_back(sum[b] / cnt[b]);
    }
    for (int b = 0; b < bins; ++b) {
      const auto& v = bin_means[b];
      if (v.empty()) continue;
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= v.size();
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      series[b].mean = mean;
      series[b].stddev = std::sqrt(var / v.size());
      series[b].seeds = static_cast<int>(v.size());
    }
    out[task] = std::move(series);
  }
  return out;
}

std::vector<MetricsRecord> episode_records(const std::vector<MetricsRecord>& recs) {
  std::vector<MetricsRecord> out;
  for (const auto& r : recs)
    if (r.kind == "episode") out.push_back(r);
  return out;
}

double final_task_return(const std::vector<MetricsRecord>& recs, int task, int tail) {
  auto eps = episode_records(recs);
  if (eps.empty() || tail < 1) return std::numeric_limits<double>::quiet_NaN();
  const int n = static_cast<int>(eps.size());
  const int start = std::max(0, n - tail);
  double mean = 0.0;
  for (int i = start; i < n; ++i) mean += eps[i].task_returns.at(task);
  return mean / (n - start);
}

std::int64_t episodes_to_threshold(const std::vector<MetricsRecord>& recs, int task,
                                   double threshold, int window) {
  if (window < 1) throw ContractError("window must be >= 1");
  auto eps = episode_records(recs);
  const int n = static_cast<int>(eps.size());
  double running = 0.0;
  for (int i = 0; i < n; ++i) {
    running += eps[i].task_returns.at(task);
    if (i >= window) running -= eps[i - window].task_returns.at(task);
    if (i >= window - 1 && running / window >= threshold) return eps[i].actor_episodes;
  }
  return -1;
}

void write_curves(const std::vector<std::string>& metrics_files, const std::string& out_dir,
                  const std::vector<std::string>& task_names) {
  fs::create_directories(out_dir);
  std::vector<std::vector<MetricsRecord>> per_seed;
  for (const auto& f : metrics_files) per_seed.push_back(read_metrics(f));

  int tasks = 0;
  for (const auto& recs : per_seed)
    for (const auto& r : recs)
      if (r.kind == "episode") tasks = std::max(tasks, (int)r.task_returns.size());
  auto label = [&](int t) {
    return t < static_cast<int>(task_names.size()) ? task_names[t]
                                                   : "task" + std::to_string(t);
  };

  {
    std::ofstream csv(out_dir + "/curves.csv");
    if (!csv) throw ContractError("cannot write '" + out_dir + "/curves.csv'");
    csv << "seed,actor_episodes,learner_step,first_task";
    for (int t = 0; t < tasks; ++t) csv << ",ret_" << label(t);
    csv << '\n';
    for (std::size_t s = 0; s < per_seed.size(); ++s)
      for (const auto& r : per_seed[s]) {
        if (r.kind != "episode") continue;
        csv << s << ',' << r.actor_episodes << ',' << r.learner_step << ','
            << r.first_task;
        for (int t = 0; t < tasks; ++t)
          csv << ','
              << (t < static_cast<int>(r.task_returns.size()) ? fmt(r.task_returns[t])
                                                              : "nan");
        csv << '\n';
      }
  }

  auto binned = binned_task_returns(per_seed, 60);

  // Plot geometry.
  const double W = 880, H = 520, L = 70, R = 700, T = 40, B = 470;
  double xmax = 1.0, ymax = 1e-9;
  for (const auto& [task, series] : binned)
    for (const auto& bin : series) {
      xmax = std::max(xmax, bin.episodes);
      if (bin.seeds > 0) ymax = std::max(ymax, bin.mean + bin.stddev);
    }
  ymax *= 1.05;
  auto X = [&](double ep) { return L + (R - L) * ep / xmax; };
  auto Y = [&](double v) { return B - (B - T) * v / ymax; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"monospace\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << L << "\" y=\"20\">episode return by actor episodes ("
      << per_seed.size() << " seed" << (per_seed.size() == 1 ? "" : "s") << ")</text>\n"
      << "<line x1=\"" << L << "\" y1=\"" << B << "\" x2=\"" << R << "\" y2=\"" << B
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << B
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double ep = xmax * i / 5.0, vv = ymax * i / 5.0;
    svg << "<text x=\"" << X(ep) - 10 << "\" y=\"" << B + 18 << "\">"
        << static_cast<std::int64_t>(ep) << "</text>\n"
        << "<line x1=\"" << X(ep) << "\" y1=\"" << B << "\" x2=\"" << X(ep) << "\" y2=\""
        << B + 4 << "\" stroke=\"black\"/>\n";
    std::ostringstream yl;
    yl.precision(3);
    yl << vv;
    svg << "<text x=\"" << L - 55 << "\" y=\"" << Y(vv) + 4 << "\">" << yl.str()
        << "</text>\n"
        << "<line x1=\"" << L - 4 << "\" y1=\"" << Y(vv) << "\" x2=\"" << L << "\" y2=\""
        << Y(vv) << "\" stroke=\"black\"/>\n";
  }

  for (const auto& [task, series] : binned) {
    const char* color = kPalette[task % 8];
    std::ostringstream band, line;
    bool any = false;
    for (const auto& bin : series) {
      if (bin.seeds == 0) continue;
      band << X(bin.episodes) << ',' << Y(std::min(ymax, bin.mean + bin.stddev)) << ' ';
      line << X(bin.episodes) << ',' << Y(std::clamp(bin.mean, 0.0, ymax)) << ' ';
      any = true;
    }
    for (auto it = series.rbegin(); it != series.rend(); ++it)
      if (it->seeds > 0)
        band << X(it->episodes) << ',' << Y(std::max(0.0, it->mean - it->stddev)) << ' ';
    if (!any) continue;
    svg << "<polygon points=\"" << band.str() << "\" fill=\"" << color
        << "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n"
        << "<polyline points=\"" << line.str() << "\" fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\"/>\n"
        << "<rect x=\"" << R + 16 << "\" y=\"" << T + 18 * task << "\" width=\"12\" "
        << "height=\"12\" fill=\"" << color << "\"/>\n"
        << "<text x=\"" << R + 34 << "\" y=\"" << T + 18 * task + 10 << "\">"
        << svg_escape(label(task)) << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream sf(out_dir + "/curves.svg");
  if (!sf) throw ContractError("cannot write '" + out_dir + "/curves.svg'");
  sf << svg.str();
}

void write_heatmap_svg(const std::string& path, const Tensor& m,
                       const std::vector<std::string>& row_labels,
                       const std::vector<std::string>& col_labels,
                       const std::string& title) {
  if (static_cast<int>(row_labels.size()) != m.rows() ||
      static_cast<int>(col_labels.size()) != m.cols())
    throw DimError("heatmap labels do not match the matrix");
  const double cell = 46, left = 130, top = 60;
  const double W = left + cell * m.cols() + 20, H = top + cell * m.rows() + 20;
  double vmax = 1e-12;
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) vmax = std::max(vmax, std::abs(m.at(r, c)));

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"monospace\" font-size=\"11\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"10\" y=\"20\">" << svg_escape(title) << "</text>\n";
  for (int c = 0; c < m.cols(); ++c)
    svg << "<text x=\"" << left + cell * c + 4 << "\" y=\"" << top - 8 << "\">"
        << svg_escape(col_labels[c]) << "</text>\n";
  for (int r = 0; r < m.rows(); ++r) {
    svg << "<text x=\"8\" y=\"" << top + cell * r + cell / 2 + 4 << "\">"
        << svg_escape(row_labels[r]) << "</text>\n";
    for (int c = 0; c < m.cols(); ++c) {
      const double t = std::abs(m.at(r, c)) / vmax;
      const int red = static_cast<int>(255 - t * (255 - 31));
      const int green = static_cast<int>(255 - t * (255 - 119));
      const int blue = static_cast<int>(255 - t * (255 - 180));
      std::ostringstream val;
      val.precision(3);
      val << m.at(r, c);
      svg << "<rect x=\"" << left + cell * c << "\" y=\"" << top + cell * r
          << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(" << red
          << ',' << green << ',' << blue << ")\" stroke=\"#ccc\"/>\n"
          << "<text x=\"" << left + cell * c + 4 << "\" y=\""
          << top + cell * r + cell / 2 + 4 << "\" fill=\"" << (t > 0.6 ? "white" : "black")
          << "\">" << val.str() << "</text>\n";
    }
  }
  svg << "</svg>\n";
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write '" + path + "'");
  out << svg.str();
}

}  // namespace rhpo
