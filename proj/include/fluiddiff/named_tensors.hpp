#pragma once
// Ordered collection of uniquely named tensors: network parameters,
// optimizer moments and scene records all travel in this form.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fluiddiff/tensor.hpp"

namespace fluiddiff {

template <typename T>
class NamedTensors {
 public:
  void add(const std::string& name, Tensor<T> tensor) {
    if (!index_.emplace(name, names_.size()).second) {
      throw std::invalid_argument("duplicate tensor name '" + name + "'");
    }
    names_.push_back(name);
    tensors_.push_back(std::move(tensor));
  }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no tensor named '" + name + "'");
    return tensors_[it->second];
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace fluiddiff
