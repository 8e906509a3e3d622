#pragma once

#include <vector>

#include "refml/data.hpp"
#include "refml/model.hpp"

namespace refml::eval {

// 100 * correct / total, argmax with lowest-index tie-break.
double accuracy(const model::ArchitectureSpec& spec, const model::ParamSet& params,
                const std::vector<data::LabeledWindow>& query);

// Same, from precomputed logits.
double accuracy(const Tensor& logits, const std::vector<std::size_t>& labels);

}  // namespace refml::eval
