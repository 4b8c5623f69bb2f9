#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbta/serialize.hpp"
#include "bbta/tensor.hpp"

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

namespace bbta {

struct QueryBudgetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The deployed-model boundary. Holds an opaque predict function and
/// exposes nothing else: no parameters, no gradients, no logits. The
/// query counter advances by batch size and is atomic, so concurrent
/// querying from worker threads keeps an exact, order-independent total.
class BlackBoxModel {
 public:
  using PredictFn = std::function<Tensor(const Tensor&)>;

  BlackBoxModel(PredictFn fn, std::size_t num_classes,
                std::optional<std::uint64_t> max_queries = std::nullopt)
      : fn_(std::move(fn)), num_classes_(num_classes), max_queries_(max_queries) {
    if (!fn_) throw std::invalid_argument("BlackBoxModel: null predict function");
    if (num_classes_ < 2) throw std::invalid_argument("BlackBoxModel: need at least 2 classes");
  }

  BlackBoxModel(const BlackBoxModel&) = delete;
  BlackBoxModel& operator=(const BlackBoxModel&) = delete;

  std::size_t num_classes() const { return num_classes_; }
  std::uint64_t query_count() const { return count_.load(std::memory_order_relaxed); }
  std::optional<std::uint64_t> max_queries() const { return max_queries_; }

  /// One forward query; returns (batch, C) probability rows. Counts the
  /// batch against the budget before evaluating.
  Tensor query(const Tensor& x) const {
    if (x.rank() < 1 || x.shape[0] == 0)
      throw std::invalid_argument("query: empty batch");
    const std::uint64_t batch = x.shape[0];
    const std::uint64_t before = count_.fetch_add(batch, std::memory_order_relaxed);
    if (max_queries_ && before + batch > *max_queries_) {
      count_.fetch_sub(batch, std::memory_order_relaxed);
      throw QueryBudgetError("query budget exhausted: " + std::to_string(before) + " consumed, " +
                             std::to_string(batch) + " requested, cap " +
                             std::to_string(*max_queries_));
    }
    Tensor p = fn_(x);
    if (p.rank() != 2 || p.shape[0] != x.shape[0] || p.shape[1] != num_classes_)
      throw std::runtime_error("query: model returned shape " + Tensor::shape_str(p.shape) +
                               ", expected (" + std::to_string(x.shape[0]) + "," +
                               std::to_string(num_classes_) + ")");
    for (std::size_t b = 0; b < p.shape[0]; ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < num_classes_; ++k) {
        const double v = p.at2(b, k);
        if (!(v >= 0.0)) throw std::runtime_error("query: negative or NaN probability");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9)
        throw std::runtime_error("query: row " + std::to_string(b) + " sums to " +
                                 std::to_string(s) + ", not a probability vector");
    }
    return p;
  }

 private:
  PredictFn fn_;
  std::size_t num_classes_;
  std::optional<std::uint64_t> max_queries_;
  mutable std::atomic<std::uint64_t> count_{0};
};

struct PseudoLabelRecord {
  std::size_t sample_index = 0;
  std::size_t class_id = 0;
  double confidence = 0.0;  // max predicted probability
};

/// Argmax pseudo-labels with confidence = max probability. Ties break
/// toward the lowest class index.
inline std::vector<PseudoLabelRecord> pseudo_label(const BlackBoxModel& model, const Tensor& x,
                                                   std::size_t index_offset = 0) {
  const Tensor p = model.query(x);
  std::vector<PseudoLabelRecord> records(p.shape[0]);
  for (std::size_t b = 0; b < p.shape[0]; ++b) {
    std::size_t best = 0;
    double conf = p.at2(b, 0);
    for (std::size_t k = 1; k < p.shape[1]; ++k)
      if (p.at2(b, k) > conf) {
        conf = p.at2(b, k);
        best = k;
      }
    records[b] = {index_offset + b, best, conf};
  }
  return records;
}

/// Wraps an external classifier reached over a child process's stdio.
/// Framing is line-delimited: each request is the binary tensor format
/// encoded as base64 on one line; each response line is a probability
/// tensor in the same encoding.
class RemoteModel {
 public:
  explicit RemoteModel(const std::vector<std::string>& argv) {
    if (argv.empty()) throw std::invalid_argument("RemoteModel: empty argv");
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0)
      throw std::runtime_error("RemoteModel: pipe failed");
    pid_ = fork();
    if (pid_ < 0) throw std::runtime_error("RemoteModel: fork failed");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      std::vector<char*> args;
      for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
      args.push_back(nullptr);
      execvp(args[0], args.data());
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    wfd_ = to_child[1];
    rfd_ = from_child[0];
  }

  ~RemoteModel() {
    if (wfd_ >= 0) close(wfd_);
    if (rfd_ >= 0) close(rfd_);
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
    }
  }

  RemoteModel(const RemoteModel&) = delete;
  RemoteModel& operator=(const RemoteModel&) = delete;

  Tensor predict(const Tensor& x) {
    std::lock_guard<std::mutex> lock(mu_);
    const std::string line = io::base64_encode(io::tensor_to_bytes(x)) + "\n";
    write_all(line);
    return io::tensor_from_bytes(io::base64_decode(read_line()));
  }

  /// Convenience: a query-counted model backed by this remote child.
  static std::shared_ptr<BlackBoxModel> open(const std::vector<std::string>& argv,
                                             std::size_t num_classes,
                                             std::optional<std::uint64_t> budget = std::nullopt) {
    auto remote = std::make_shared<RemoteModel>(argv);
    return std::make_shared<BlackBoxModel>(
        [remote](const Tensor& x) { return remote->predict(x); }, num_classes, budget);
  }

 private:
  void write_all(const std::string& s) {
    std::size_t done = 0;
    while (done < s.size()) {
      const ssize_t n = ::write(wfd_, s.data() + done, s.size() - done);
      if (n <= 0) throw std::runtime_error("RemoteModel: write failed (child gone?)");
      done += static_cast<std::size_t>(n);
    }
  }

  std::string read_line() {
    std::string line;
    char c;
    while (true) {
      const ssize_t n = ::read(rfd_, &c, 1);
      if (n <= 0) throw std::runtime_error("RemoteModel: child closed the stream");
      if (c == '\n') return line;
      line.push_back(c);
    }
  }

  pid_t pid_ = -1;
  int wfd_ = -1, rfd_ = -1;
  std::mutex mu_;
};

}  // namespace bbta
