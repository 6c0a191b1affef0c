#pragma once

/**
 * Serialization plumbing shared by the CLI: shortest-round-trip double
 * formatting (so reruns are byte-identical), CSV writing, the flat
 * KEY=VALUE config/manifest format, and JSON codecs for tasks, checkpoints
 * and training histories.
 */

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "speclab/toyfit.hpp"
#include "speclab/train.hpp"

namespace speclab::io {

// Shortest decimal string that round-trips the exact double.
std::string format_double(double x);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view content);

// Flat config: one KEY=VALUE per line, '#' comments, later keys win.
using KeyValueMap = std::map<std::string, std::string>;

KeyValueMap parse_flat_config(std::string_view content);
std::string render_flat_config(const KeyValueMap& kv);

// Typed lookups with defaults; throw std::invalid_argument on bad values.
double get_double(const KeyValueMap& kv, const std::string& key, double fallback);
std::int64_t get_int(const KeyValueMap& kv, const std::string& key, std::int64_t fallback);
std::uint64_t get_u64(const KeyValueMap& kv, const std::string& key, std::uint64_t fallback);
bool get_bool(const KeyValueMap& kv, const std::string& key, bool fallback);
std::string get_string(const KeyValueMap& kv, const std::string& key, std::string fallback);

class CsvWriter {
public:
    void header(const std::vector<std::string>& columns);
    void cell(std::string_view text);
    void cell(double value);
    void cell(std::size_t value);
    void end_row();
    const std::string& str() const { return out_; }

private:
    std::string out_;
    bool row_open_ = false;
};

nlohmann::json task_to_json(const toyfit::ToyTask& task);
toyfit::ToyTask task_from_json(const nlohmann::json& j);

nlohmann::json params_to_json(const train::ToyDraftParams& params);
train::ToyDraftParams params_from_json(const nlohmann::json& j);

nlohmann::json history_to_json(const train::TrainHistory& history);

// CSV columns (epoch, head, loss, alpha[, lambda]); the lambda column is
// present only when the loss kind carries one.
std::string history_to_csv(const train::TrainHistory& history, bool include_lambda);

}  // namespace speclab::io
