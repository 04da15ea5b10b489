/**
 * Copyright 2026 The Spill Detection Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace spill {

/// Failure categories raised across the pipeline. Callers branch on the code;
/// the message carries the human-readable detail.
enum class Errc {
  invalid_argument,
  // frame-sources
  unknown_source_kind,
  source_unreadable,
  device_unavailable,
  end_of_stream,
  skew_exceeded,
  write_failure,
  index_collision,
  // geometry-align
  too_few_points,
  degenerate_configuration,
  non_invertible,
  out_of_bounds,
  dimension_mismatch,
  // dataset-manager
  unreadable_root,
  empty_subset,
  // training-harness
  unknown_backbone,
  unknown_preprocess,
  weights_unavailable,
  empty_split,
  out_of_memory,
  // evaluation-bench / inference-service
  modality_mismatch,
  missing_file,
  model_load_failure,
  fusion_failure,
  unknown_frame_ref,
  no_active_session,
  queue_full,
  io_error,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace spill
