#include "pulseppg/errors.hpp"

namespace pulseppg {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::degenerate_subject: return "degenerate-subject";
    case ErrorKind::degenerate_batch: return "degenerate-batch";
    case ErrorKind::invalid_task: return "invalid-task";
    case ErrorKind::training_diverged: return "training-diverged";
    case ErrorKind::misuse: return "misuse";
    case ErrorKind::data_not_found: return "data-not-found";
    case ErrorKind::config_schema: return "config-schema";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

}  // namespace pulseppg
