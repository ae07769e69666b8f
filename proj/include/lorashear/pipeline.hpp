#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "lorashear/config.hpp"

namespace lorashear {

namespace fs = std::filesystem;

// Stage names in execution order.
const std::vector<std::string>& stage_names();

// Writes <out>/config.json (defaults materialized). Fails with StageError if
// the directory already holds a run with a different configuration.
void materialize_config(const PipelineConfig& config, const fs::path& out);
// Reads the materialized configuration of an existing run.
PipelineConfig load_run_config(const fs::path& out);

void stage_gen_data(const fs::path& out);
void stage_pretrain(const fs::path& out);
void stage_analyze(const fs::path& out);
void stage_prune(const fs::path& out);
void stage_compress(const fs::path& out);
void stage_recover(const fs::path& out);
void stage_eval(const fs::path& out);
void stage_report(const fs::path& out);

void run_stage(const std::string& name, const fs::path& out);

// Materializes the config, then runs every stage up to and including `last`.
void run_all(const PipelineConfig& config, const fs::path& out, const std::string& last = "report");

nlohmann::json read_json(const fs::path& path);
void write_json(const fs::path& path, const nlohmann::json& j);
void write_text(const fs::path& path, const std::string& text);

}  // namespace lorashear
