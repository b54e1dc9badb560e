#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pulseppg {

enum class ErrorKind {
  invalid_argument,
  degenerate_subject,
  degenerate_batch,
  invalid_task,
  training_diverged,
  misuse,
  data_not_found,
  config_schema,
  io,
};

std::string_view to_string(ErrorKind kind);

// Every library failure carries a category so the CLI can map it to an exit
// code and a single machine-parsable line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(int epoch, const std::string& what)
      : Error(ErrorKind::training_diverged, what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::invalid_argument, what);
}

}  // namespace pulseppg
