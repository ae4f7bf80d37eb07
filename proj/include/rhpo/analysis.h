#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rhpo/runtime.h"

namespace rhpo {

// Empirical execution statistics of a hierarchical policy: which components
// each active task samples, which tasks each component serves, and how far
// apart the component Gaussians themselves sit. Count rows are floor-padded
// before normalization so never-used components give finite distances.
struct SimilarityReport {
  std::vector<std::string> task_names;  // active tasks, in order
  Tensor task_component;      // tasks x M, rows are P(component | task)
  Tensor component_task;      // M x tasks, rows are P(task | component)
  Tensor task_distance;       // tasks x tasks Bhattacharyya of usage rows
  Tensor component_distance;  // M x M Bhattacharyya of activation rows
  Tensor gaussian_distance;   // M x M mean component-Gaussian Bhattacharyya
};

SimilarityReport analyze_similarity(const TrainState& ts, Env& env, int episodes_per_task,
                                    Rng& rng);
// CSVs plus heatmap SVGs for every matrix in the report.
void write_similarity(const SimilarityReport& rep, const std::string& dir);

struct CurveBin {
  double episodes = 0.0;  // right edge of the bin
  double mean = 0.0;
  double stddev = 0.0;  // population std across seeds
  int seeds = 0;
};

// Per-task learning curves: per seed, episode returns are averaged inside
// actor-episode bins; across seeds the bin means give mean and std.
std::map<int, std::vector<CurveBin>> binned_task_returns(
    const std::vector<std::vector<MetricsRecord>>& per_seed, int bins);

// curves.csv holds one row per episode record (seed, episodes, step, first
// task, one return column per task); curves.svg draws binned means with a
// +-1 std band per task.
void write_curves(const std::vector<std::string>& metrics_files, const std::string& out_dir,
                  const std::vector<std::string>& task_names);

std::vector<MetricsRecord> episode_records(const std::vector<MetricsRecord>& recs);
// Mean return over the last `tail` episode records; NaN without data.
double final_task_return(const std::vector<MetricsRecord>& recs, int task, int tail);
// Actor-episode count at which the trailing moving average over `window`
// episode records first reaches `threshold`; -1 if it never does.
std::int64_t episodes_to_threshold(const std::vector<MetricsRecord>& recs, int task,
                                   double threshold, int window);

void write_heatmap_svg(const std::string& path, const Tensor& m,
                       const std::vector<std::string>& row_labels,
                       const std::vector<std::string>& col_labels,
                       const std::string& title);

}  // namespace rhpo
