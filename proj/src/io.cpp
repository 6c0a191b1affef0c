#include "speclab/io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace speclab::io {

std::string format_double(double x) {
    char buffer[64];
    const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), x);
    if (ec != std::errc()) {
        throw std::runtime_error("format_double: conversion failed");
    }
    return std::string(buffer, ptr);
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open file: " + path.string());
    }
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view content) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write file: " + path.string());
    }
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

}  // namespace

KeyValueMap parse_flat_config(std::string_view content) {
    KeyValueMap kv;
    std::size_t pos = 0;
    while (pos <= content.size()) {
        const std::size_t nl = content.find('\n', pos);
        std::string_view line =
            content.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? content.size() + 1 : nl + 1;
        line = trim(line);
        if (line.empty() || line.front() == '#') {
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw std::invalid_argument("config line is not KEY=VALUE: '" + std::string(line) + "'");
        }
        kv[std::string(trim(line.substr(0, eq)))] = std::string(trim(line.substr(eq + 1)));
    }
    return kv;
}

std::string render_flat_config(const KeyValueMap& kv) {
    std::string out;
    for (const auto& [key, value] : kv) {  // std::map keeps keys sorted
        out += key;
        out += '=';
        out += value;
        out += '\n';
    }
    return out;
}

double get_double(const KeyValueMap& kv, const std::string& key, double fallback) {
    const auto it = kv.find(key);
    if (it == kv.end()) {
        return fallback;
    }
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) {
            throw std::invalid_argument("trailing characters");
        }
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': bad number '" + it->second + "'");
    }
}

std::int64_t get_int(const KeyValueMap& kv, const std::string& key, std::int64_t fallback) {
    const auto it = kv.find(key);
    if (it == kv.end()) {
        return fallback;
    }
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (ec != std::errc() || ptr != it->second.data() + it->second.size()) {
        throw std::invalid_argument("config key '" + key + "': bad integer '" + it->second + "'");
    }
    return v;
}

std::uint64_t get_u64(const KeyValueMap& kv, const std::string& key, std::uint64_t fallback) {
    const auto it = kv.find(key);
    if (it == kv.end()) {
        return fallback;
    }
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (ec != std::errc() || ptr != it->second.data() + it->second.size()) {
        throw std::invalid_argument("config key '" + key + "': bad integer '" + it->second + "'");
    }
    return v;
}

bool get_bool(const KeyValueMap& kv, const std::string& key, bool fallback) {
    const auto it = kv.find(key);
    if (it == kv.end()) {
        return fallback;
    }
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::invalid_argument("config key '" + key + "': bad boolean '" + it->second + "'");
}

std::string get_string(const KeyValueMap& kv, const std::string& key, std::string fallback) {
    const auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

void CsvWriter::header(const std::vector<std::string>& columns) {
    for (std::size_t i = 0; i < columns.size(); ++i) {
        if (i > 0) {
            out_ += ',';
        }
        out_ += columns[i];
    }
    out_ += '\n';
}

void CsvWriter::cell(std::string_view text) {
    if (row_open_) {
        out_ += ',';
    }
    out_ += text;
    row_open_ = true;
}

void CsvWriter::cell(double value) {
    cell(std::string_view(format_double(value)));
}

void CsvWriter::cell(std::size_t value) {
    cell(std::string_view(std::to_string(value)));
}

void CsvWriter::end_row() {
    out_ += '\n';
    row_open_ = false;
}

nlohmann::json task_to_json(const toyfit::ToyTask& task) {
    nlohmann::json j;
    j["vocab_size"] = task.vocab_size;
    j["family"] = task.family == toyfit::DraftFamily::SharedCategorical ? "shared_categorical"
                                                                        : "linear_logits";
    j["seed"] = task.seed;
    j["concentration"] = task.concentration;
    j["fingerprint"] = task.fingerprint();
    auto& contexts = j["contexts"] = nlohmann::json::array();
    for (const auto& ctx : task.contexts) {
        contexts.push_back(ctx.probs());
    }
    if (!task.features.empty()) {
        j["features"] = task.features;
    }
    if (task.draft_mask.has_value()) {
        std::vector<std::size_t> allowed;
        for (std::size_t i = 0; i < task.vocab_size; ++i) {
            if (task.draft_mask->allows(i)) {
                allowed.push_back(i);
            }
        }
        j["draft_mask"] = allowed;
    }
    return j;
}

toyfit::ToyTask task_from_json(const nlohmann::json& j) {
    toyfit::ToyTask task;
    task.vocab_size = j.at("vocab_size").get<std::size_t>();
    const std::string family = j.at("family").get<std::string>();
    if (family == "shared_categorical") {
        task.family = toyfit::DraftFamily::SharedCategorical;
    } else if (family == "linear_logits") {
        task.family = toyfit::DraftFamily::LinearLogits;
    } else {
        throw std::invalid_argument("task_from_json: unknown family '" + family + "'");
    }
    task.seed = j.at("seed").get<std::uint64_t>();
    task.concentration = j.at("concentration").get<double>();
    for (const auto& ctx : j.at("contexts")) {
        task.contexts.emplace_back(ctx.get<std::vector<double>>());
    }
    if (j.contains("features")) {
        task.features = j.at("features").get<std::vector<std::vector<double>>>();
    }
    if (j.contains("draft_mask")) {
        task.draft_mask =
            VocabMask(task.vocab_size, j.at("draft_mask").get<std::vector<std::size_t>>());
    }
    if (j.contains("fingerprint") &&
        j.at("fingerprint").get<std::uint64_t>() != task.fingerprint()) {
        throw std::invalid_argument("task_from_json: fingerprint mismatch (corrupted fixture?)");
    }
    return task;
}

nlohmann::json params_to_json(const train::ToyDraftParams& params) {
    nlohmann::json j;
    j["family"] = params.family == toyfit::DraftFamily::SharedCategorical ? "shared_categorical"
                                                                          : "linear_logits";
    j["vocab_size"] = params.vocab_size;
    j["rows"] = params.rows;
    j["weights"] = params.weights;
    return j;
}

train::ToyDraftParams params_from_json(const nlohmann::json& j) {
    train::ToyDraftParams params;
    const std::string family = j.at("family").get<std::string>();
    params.family = family == "linear_logits" ? toyfit::DraftFamily::LinearLogits
                                              : toyfit::DraftFamily::SharedCategorical;
    params.vocab_size = j.at("vocab_size").get<std::size_t>();
    params.rows = j.at("rows").get<std::size_t>();
    params.weights = j.at("weights").get<std::vector<double>>();
    if (params.weights.size() != params.rows * params.vocab_size) {
        throw std::invalid_argument("params_from_json: weight shape mismatch");
    }
    return params;
}

nlohmann::json history_to_json(const train::TrainHistory& history) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& record : history.epochs) {
        nlohmann::json heads = nlohmann::json::array();
        for (const auto& head : record.heads) {
            nlohmann::json h;
            h["loss"] = head.loss;
            h["alpha"] = head.alpha;
            h["weight"] = head.weight;
            if (head.lambda.has_value()) {
                h["lambda"] = *head.lambda;
            }
            heads.push_back(std::move(h));
        }
        epochs.push_back({{"epoch", record.epoch},
                          {"weighted_loss", record.weighted_loss},
                          {"heads", std::move(heads)}});
    }
    return nlohmann::json{{"epochs", std::move(epochs)}};
}

std::string history_to_csv(const train::TrainHistory& history, bool include_lambda) {
    CsvWriter csv;
    std::vector<std::string> columns = {"epoch", "head", "loss", "alpha"};
    if (include_lambda) {
        columns.push_back("lambda");
    }
    csv.header(columns);
    for (const auto& record : history.epochs) {
        for (std::size_t h = 0; h < record.heads.size(); ++h) {
            csv.cell(record.epoch);
            csv.cell(h);
            csv.cell(record.heads[h].loss);
            csv.cell(record.heads[h].alpha);
            if (include_lambda) {
                csv.cell(record.heads[h].lambda.value_or(0.0));
            }
            csv.end_row();
        }
    }
    return csv.str();
}

}  // namespace speclab::io
