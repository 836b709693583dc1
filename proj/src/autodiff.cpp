#include "find3d/autodiff.hpp"

namespace find3d::ad {

void SparseRows::add_row(std::span<const std::uint32_t> cols_in_row, std::span<const double> weights) {
  if (cols_in_row.size() != weights.size()) throw std::invalid_argument("SparseRows: weight count mismatch");
  for (std::size_t i = 0; i < cols_in_row.size(); ++i) {
    if (cols_in_row[i] >= cols) throw std::out_of_range("SparseRows: column out of range");
    col.push_back(cols_in_row[i]);
    weight.push_back(weights[i]);
  }
  offset.push_back(static_cast<std::uint32_t>(col.size()));
}

void SparseRows::add_mean_row(std::span<const std::uint32_t> cols_in_row) {
  const double w = cols_in_row.empty() ? 0.0 : 1.0 / static_cast<double>(cols_in_row.size());
  std::vector<double> weights(cols_in_row.size(), w);
  add_row(cols_in_row, weights);
}

SparseRows SparseRows::gather(std::span<const std::uint32_t> index, std::size_t input_rows) {
  SparseRows s;
  s.cols = input_rows;
  const double one = 1.0;
  for (std::uint32_t i : index) s.add_row(std::span<const std::uint32_t>(&i, 1), std::span<const double>(&one, 1));
  return s;
}

}  // namespace find3d::ad
