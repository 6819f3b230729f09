// SPDX-License-Identifier: Apache-2.0

#include "p4q/config.hpp"

#include <charconv>
#include <functional>
#include <set>

#include <fmt/format.h>

#include "p4q/checkpoint.hpp"
#include "p4q/error.hpp"

namespace p4q::config {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view value) {
    T out{};
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        fail(ErrorKind::parameter, fmt::format("{}: cannot parse '{}'", key, value));
    }
    return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    fail(ErrorKind::parameter, fmt::format("{}: expected true or false, got '{}'", key, value));
}

struct Field {
    std::string name;
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field number(std::string name, T pipeline::ExperimentConfig::*member) {
    return {name,
            [name, member](RunConfig& c, std::string_view v) { c.experiment.*member = parse_number<T>(name, v); },
            [member](const RunConfig& c) { return fmt::format("{}", c.experiment.*member); }};
}

Field real(std::string name, std::function<double&(RunConfig&)> ref) {
    return {name, [name, ref](RunConfig& c, std::string_view v) { ref(c) = parse_number<double>(name, v); },
            [ref](const RunConfig& c) { return fmt::format("{:.17g}", ref(const_cast<RunConfig&>(c))); }};
}

Field size(std::string name, std::function<std::size_t&(RunConfig&)> ref) {
    return {name, [name, ref](RunConfig& c, std::string_view v) { ref(c) = parse_number<std::size_t>(name, v); },
            [ref](const RunConfig& c) { return fmt::format("{}", ref(const_cast<RunConfig&>(c))); }};
}

Field path(std::string name, std::string RunConfig::*member) {
    return {name,
            [name, member](RunConfig& c, std::string_view v) {
                require(!v.empty(), ErrorKind::parameter, name + ": empty path");
                c.*member = std::string(v);
            },
            [member](const RunConfig& c) { return c.*member; }};
}

const std::vector<Field>& fields() {
    using E = pipeline::ExperimentConfig;
    static const std::vector<Field> table = {
        number("bits", &E::bits),
        number("block_size", &E::block_size),
        number("rank", &E::rank),
        real("alpha", [](RunConfig& c) -> double& { return c.experiment.alpha; }),
        size("d_in", [](RunConfig& c) -> std::size_t& { return c.experiment.shape.d_in; }),
        size("d_model", [](RunConfig& c) -> std::size_t& { return c.experiment.shape.d_model; }),
        size("d_out", [](RunConfig& c) -> std::size_t& { return c.experiment.shape.d_out; }),
        number("batch_size", &E::batch_size),
        real("epsilon", [](RunConfig& c) -> double& { return c.experiment.epsilon; }),
        real("domain_share", [](RunConfig& c) -> double& { return c.experiment.domain_share; }),
        number("pretrain_speakers", &E::pretrain_speakers),
        number("test_speakers", &E::test_speakers),
        number("train_samples", &E::train_samples),
        number("test_samples", &E::test_samples),
        number("base_samples", &E::base_samples),
        number("base_epochs", &E::base_epochs),
        number("pretrain_epochs", &E::pretrain_epochs),
        number("adapt_epochs", &E::adapt_epochs),
        real("learning_rate", [](RunConfig& c) -> double& { return c.experiment.adam.learning_rate; }),
        real("beta1", [](RunConfig& c) -> double& { return c.experiment.adam.beta1; }),
        real("beta2", [](RunConfig& c) -> double& { return c.experiment.adam.beta2; }),
        real("adam_epsilon", [](RunConfig& c) -> double& { return c.experiment.adam.epsilon; }),
        real("teacher_bias_std", [](RunConfig& c) -> double& { return c.experiment.teacher_bias_std; }),
        number("seed", &E::seed),
        number("seeds", &E::seeds),
        {"fft_requantize",
         [](RunConfig& c, std::string_view v) { c.experiment.fft_requantize = parse_bool("fft_requantize", v); },
         [](const RunConfig& c) { return std::string(c.experiment.fft_requantize ? "true" : "false"); }},
        number("threads", &E::threads),
        path("base_checkpoint", &RunConfig::base_checkpoint),
        path("quant_checkpoint", &RunConfig::quant_checkpoint),
        path("adapter_file", &RunConfig::adapter_file),
        path("speaker_adapter_file", &RunConfig::speaker_adapter_file),
        path("report_file", &RunConfig::report_file),
        path("records_file", &RunConfig::records_file),
    };
    return table;
}

const Field& find(std::string_view key) {
    for (const Field& f : fields())
        if (f.name == key) return f;
    fail(ErrorKind::parameter, fmt::format("unknown config key '{}'", key));
}

}  // namespace

void set(RunConfig& config, std::string_view key, std::string_view value) { find(key).set(config, trim(value)); }

RunConfig parse(std::string_view text) {
    RunConfig config;
    std::set<std::string, std::less<>> seen;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = trim(text.substr(0, nl));
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (line.empty() || line.front() == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            fail(ErrorKind::parameter, fmt::format("config line {}: expected 'key = value'", line_no));
        }
        const std::string_view key = trim(line.substr(0, eq));
        try {
            if (!seen.emplace(key).second) fail(ErrorKind::parameter, fmt::format("duplicate key '{}'", key));
            set(config, key, line.substr(eq + 1));
        } catch (const Error& e) {
            fail(ErrorKind::parameter, fmt::format("config line {}: {}", line_no, e.what()));
        }
    }
    pipeline::validate(config.experiment);
    return config;
}

RunConfig load(const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = io::read_file(path);
    return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

const std::vector<std::string>& keys() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const Field& f : fields()) out.push_back(f.name);
        return out;
    }();
    return names;
}

std::string render(const RunConfig& config) {
    std::string out;
    for (const Field& f : fields()) out += fmt::format("{} = {}\n", f.name, f.get(config));
    return out;
}

}  // namespace p4q::config
