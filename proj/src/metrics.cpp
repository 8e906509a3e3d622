#include "refml/metrics.hpp"

#include "refml/error.hpp"

namespace refml::eval {

double accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (labels.empty()) throw DataError("accuracy: empty query");
  const auto predicted = argmax_rows(logits);
  if (predicted.size() != labels.size()) throw ShapeError("accuracy: logits rows do not match labels");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

double accuracy(const model::ArchitectureSpec& spec, const model::ParamSet& params,
                const std::vector<data::LabeledWindow>& query) {
  if (query.empty()) throw DataError("accuracy: empty query");
  const auto out = model::forward(spec, params, data::stack_signals(query));
  return accuracy(out.logits, data::labels_of(query));
}

}  // namespace refml::eval
