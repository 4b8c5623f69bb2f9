#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "bbta/blackbox.hpp"
#include "bbta/tensor.hpp"

namespace bbta {

struct SelectionConfig {
  double tau = 0.9;  // confidence must be strictly greater
  double rho = 0.9;  // noise ratio; caps each class at (1-rho)*n/C
  std::size_t num_classes = 0;
  std::size_t n = 0;

  void validate() const {
    if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("selection: tau must be in [0,1]");
    if (rho < 0.0 || rho >= 1.0) throw std::invalid_argument("selection: rho must be in [0,1)");
    if (num_classes == 0) throw std::invalid_argument("selection: num_classes must be positive");
    if (n == 0) throw std::invalid_argument("selection: n must be positive");
  }

  /// floor((1-rho)*n/C); the tiny nudge keeps exact-integer products
  /// from flooring one short of the intended cap (0.1*10000/10 -> 100).
  std::size_t per_class_cap() const {
    const double raw =
        (1.0 - rho) * static_cast<double>(n) / static_cast<double>(num_classes);
    return static_cast<std::size_t>(std::floor(raw + 1e-9));
  }
};

struct Selection {
  std::vector<std::size_t> reliable;    // ascending sample indices
  std::vector<std::size_t> unreliable;  // ascending sample indices
  std::vector<char> is_reliable;        // indexed by sample index
};

/// Keeps, per class, the most confident records with confidence > tau,
/// at most per_class_cap of them (ties broken by lower sample index).
/// Everything else is unreliable; the two sets partition 0..n-1.
inline Selection select_reliable(const std::vector<PseudoLabelRecord>& records,
                                 const SelectionConfig& cfg) {
  cfg.validate();
  if (records.size() != cfg.n)
    throw std::invalid_argument("select_reliable: got " + std::to_string(records.size()) +
                                " records for n=" + std::to_string(cfg.n));
  std::vector<char> seen(cfg.n, 0);
  for (const auto& r : records) {
    if (r.sample_index >= cfg.n)
      throw std::invalid_argument("select_reliable: sample index out of range");
    if (seen[r.sample_index]) throw std::invalid_argument("select_reliable: duplicate index");
    seen[r.sample_index] = 1;
    if (r.class_id >= cfg.num_classes)
      throw std::invalid_argument("select_reliable: class id out of range");
  }

  std::vector<std::vector<const PseudoLabelRecord*>> per_class(cfg.num_classes);
  for (const auto& r : records)
    if (r.confidence > cfg.tau) per_class[r.class_id].push_back(&r);

  Selection sel;
  sel.is_reliable.assign(cfg.n, 0);
  const std::size_t cap = cfg.per_class_cap();
  for (auto& bucket : per_class) {
    std::sort(bucket.begin(), bucket.end(),
              [](const PseudoLabelRecord* a, const PseudoLabelRecord* b) {
                if (a->confidence != b->confidence) return a->confidence > b->confidence;
                return a->sample_index < b->sample_index;
              });
    const std::size_t keep = std::min(cap, bucket.size());
    for (std::size_t i = 0; i < keep; ++i) sel.is_reliable[bucket[i]->sample_index] = 1;
  }
  for (std::size_t i = 0; i < cfg.n; ++i)
    (sel.is_reliable[i] ? sel.reliable : sel.unreliable).push_back(i);
  return sel;
}

/// Bounded, per-class-capped, confidence-ordered store for online mode.
/// Capacity S and per-class cap floor(S/C); pushing into a full class pops
/// the entry with the smallest confidence for that class (which may be
/// the incoming record: an incumbent is displaced only by strictly
/// greater confidence).
class ReliableQueue {
 public:
  struct Entry {
    PseudoLabelRecord record;
    Tensor data;  // one sample, shape (1, ...)
  };

  ReliableQueue(std::size_t capacity, std::size_t num_classes)
      : capacity_(capacity), entries_(num_classes) {
    if (num_classes == 0) throw std::invalid_argument("ReliableQueue: num_classes must be > 0");
    if (capacity < num_classes)
      throw std::invalid_argument("ReliableQueue: capacity below one entry per class");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t num_classes() const { return entries_.size(); }
  std::size_t per_class_cap() const { return capacity_ / entries_.size(); }

  std::size_t size() const {
    std::size_t s = 0;
    for (const auto& b : entries_) s += b.size();
    return s;
  }

  std::size_t class_count(std::size_t c) const { return entries_.at(c).size(); }

  /// Inserts in confidence order; returns the evicted record, if any.
  std::optional<PseudoLabelRecord> push(const PseudoLabelRecord& record, const Tensor& data) {
    if (record.class_id >= entries_.size())
      throw std::invalid_argument("ReliableQueue: class id out of range");
    auto& bucket = entries_[record.class_id];
    // Insert after all entries with confidence >= incoming (stable for ties).
    auto it = std::upper_bound(bucket.begin(), bucket.end(), record.confidence,
                               [](double conf, const Entry& e) { return conf > e.record.confidence; });
    bucket.insert(it, Entry{record, data});
    std::optional<PseudoLabelRecord> evicted;
    if (bucket.size() > per_class_cap()) {
      evicted = bucket.back().record;
      bucket.pop_back();
    }
    return evicted;
  }

  struct Snapshot {
    Tensor images;                    // (k, ...) in (class, confidence desc) order
    std::vector<std::size_t> labels;  // class ids, same order
    std::vector<double> confidences;
  };

  /// Copies the stored data in deterministic (class, confidence) order.
  Snapshot snapshot() const {
    Snapshot snap;
    std::size_t total = size();
    if (total == 0) return snap;
    const Tensor& first = first_entry().data;
    std::vector<std::size_t> shape = first.shape;
    shape[0] = total;
    snap.images = Tensor(std::move(shape));
    const std::size_t stride = first.numel();
    std::size_t row = 0;
    for (std::size_t c = 0; c < entries_.size(); ++c)
      for (const Entry& e : entries_[c]) {
        std::copy(e.data.data.begin(), e.data.data.end(),
                  snap.images.data.begin() + row * stride);
        snap.labels.push_back(e.record.class_id);
        snap.confidences.push_back(e.record.confidence);
        ++row;
      }
    return snap;
  }

 private:
  const Entry& first_entry() const {
    for (const auto& b : entries_)
      if (!b.empty()) return b.front();
    throw std::logic_error("ReliableQueue: empty");
  }

  std::size_t capacity_;
  std::vector<std::vector<Entry>> entries_;  // per class, confidence descending
};

}  // namespace bbta
