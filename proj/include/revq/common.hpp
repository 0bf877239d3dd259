#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace revq {

/// The three binary quality features a review comment is scored on.
enum class Task : std::uint8_t { suggestion = 0, problem = 1, positive_tone = 2 };

inline constexpr std::array<Task, 3> kAllTasks{Task::suggestion, Task::problem,
                                               Task::positive_tone};
inline constexpr std::size_t kTaskCount = kAllTasks.size();

constexpr std::string_view task_name(Task t) {
  switch (t) {
    case Task::suggestion:
      return "suggestion";
    case Task::problem:
      return "problem";
    case Task::positive_tone:
      return "positive_tone";
  }
  return "?";
}

constexpr std::size_t task_index(Task t) { return static_cast<std::size_t>(t); }

inline std::optional<Task> parse_task(std::string_view s) {
  for (Task t : kAllTasks) {
    if (task_name(t) == s) return t;
  }
  if (s == "tone") return Task::positive_tone;
  return std::nullopt;
}

struct FeatureLabels {
  std::uint8_t suggestion = 0;
  std::uint8_t problem = 0;
  std::uint8_t positive_tone = 0;

  constexpr std::uint8_t operator[](Task t) const {
    switch (t) {
      case Task::suggestion:
        return suggestion;
      case Task::problem:
        return problem;
      case Task::positive_tone:
        return positive_tone;
    }
    return 0;
  }
  std::uint8_t& at(Task t) {
    switch (t) {
      case Task::suggestion:
        return suggestion;
      case Task::problem:
        return problem;
      case Task::positive_tone:
        break;
    }
    return positive_tone;
  }

  friend bool operator==(const FeatureLabels&, const FeatureLabels&) = default;
};

// Error families. Each maps to one failure class the CLI turns into an exit code.

/// Input data is malformed or violates a dataset invariant.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IngestionError : public DataError {
 public:
  IngestionError(const std::string& what, std::size_t line)
      : DataError(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class SizingError : public DataError {
 public:
  SizingError(const std::string& what, std::size_t available)
      : DataError(what), available_(available) {}
  std::size_t available() const { return available_; }

 private:
  std::size_t available_;
};

/// Text that has nothing left to classify after cleaning.
class UnusableTextError : public DataError {
 public:
  using DataError::DataError;
};

/// A statistic is undefined for the given input (single class, empty set, ...).
class DegenerateInputError : public DataError {
 public:
  using DataError::DataError;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ModelConstructionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

}  // namespace revq
