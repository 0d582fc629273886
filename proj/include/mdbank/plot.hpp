#pragma once

#include <filesystem>
#include <vector>

#include "mdbank/evaluation.hpp"
#include "mdbank/experiments.hpp"
#include "mdbank/trainer.hpp"

namespace mdbank::plot {

class PlotError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Each function renders one PNG. The output format follows the file extension
// understood by OpenCV (png, jpg, bmp).
void pr_curves(const eval::EvalReport& report, const std::filesystem::path& out);
void sweep_curve(const std::vector<exp::SweepResult>& sweeps, const std::filesystem::path& out);
void training_curves(const std::vector<StepMetrics>& metrics, const std::filesystem::path& out);
void embedding_scatter(const eval::EmbeddingTable& table, const std::filesystem::path& out);

std::vector<StepMetrics> read_metrics(const std::filesystem::path& jsonl);

}  // namespace mdbank::plot
