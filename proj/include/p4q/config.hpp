// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "p4q/pipeline.hpp"

namespace p4q::config {

/// Experiment settings plus the file locations the command-line stages share.
struct RunConfig {
    pipeline::ExperimentConfig experiment;
    std::string base_checkpoint = "base.nfq";
    std::string quant_checkpoint = "base_nf4.nfq";
    std::string adapter_file = "pretrained.nfa";
    std::string speaker_adapter_file = "speaker.nfa";
    std::string report_file = "report.txt";
    std::string records_file = "records.csv";
};

/// Parses `key = value` lines. Blank lines and lines starting with '#' are
/// ignored; unknown keys, repeated keys and malformed values are parameter
/// errors naming the line.
RunConfig parse(std::string_view text);
RunConfig load(const std::filesystem::path& path);

/// Applies one setting; the same validation as a config line.
void set(RunConfig& config, std::string_view key, std::string_view value);

/// Every accepted key, in documentation order.
const std::vector<std::string>& keys();

/// Renders every key with its current value; parse(render(c)) == c.
std::string render(const RunConfig& config);

}  // namespace p4q::config
