// SPDX-License-Identifier: Apache-2.0

#include "p4q/stages.hpp"

#include <filesystem>

#include "p4q/checkpoint.hpp"
#include "p4q/error.hpp"
#include "p4q/pipeline.hpp"

namespace p4q::stages {

namespace {

using pipeline::Role;

std::filesystem::path bias_path(const std::string& adapter_file) { return adapter_file + ".bias"; }

void store_adapted(const net::ToyModel& model, const std::string& path) {
    io::store_adapters(path, io::collect_adapters(model));
    io::store_checkpoint(bias_path(path), io::biases_to_checkpoint(model));
}

// Quantized model from disk with the adapters (and their biases) of `path`.
net::ToyModel load_adapted(const config::RunConfig& config, const std::string& path) {
    net::ToyModel model = io::model_from_checkpoint(io::load_checkpoint(config.quant_checkpoint));
    io::attach_adapters(model, io::load_adapters(path));
    if (std::filesystem::exists(bias_path(path))) io::assign_biases(model, io::load_checkpoint(bias_path(path)));
    return model;
}

double mean_test_loss(const net::ToyModel& model, std::span<const pipeline::SpeakerTask> speakers) {
    double sum = 0.0;
    for (const auto& s : speakers) sum += net::evaluate(model, s.test);
    return sum / static_cast<double>(speakers.size());
}

}  // namespace

BaseSummary train_base(const config::RunConfig& config) {
    const pipeline::ExperimentConfig& c = config.experiment;
    BaseSummary out;
    const net::ToyModel base = pipeline::train_base(c, c.seed, &out.initial_loss, &out.final_loss);
    const io::Checkpoint fp32 = io::model_to_checkpoint(base);
    const io::Checkpoint quant = io::quantize_checkpoint(fp32, c.bits, c.block_size, c.threads);
    io::store_checkpoint(config.base_checkpoint, fp32);
    io::store_checkpoint(config.quant_checkpoint, quant);
    out.fp32_bytes = io::checkpoint_size(fp32);
    out.quantized_bytes = io::checkpoint_size(quant);
    return out;
}

PretrainSummary pretrain_lora(const config::RunConfig& config) {
    const pipeline::ExperimentConfig& c = config.experiment;
    pipeline::validate(c);
    const net::ToyModel quantized = io::model_from_checkpoint(io::load_checkpoint(config.quant_checkpoint));
    require(quantized.is_quantized(), ErrorKind::parameter, config.quant_checkpoint + " holds no quantized weights");
    const net::ToyModel teacher = pipeline::make_teacher(c, c.seed);
    const auto pool = pipeline::pool_speakers(c, c.seed, teacher);

    RngStream adapter_rng(pipeline::role_seed(c.seed, Role::adapters));
    const net::ToyModel scratch = net::attach_fresh_adapters(quantized, c.rank, c.alpha, adapter_rng);
    const net::ToyModel trained = pipeline::stage2_pretrain_lora(
        scratch, pool, pipeline::lora_config(c, c.pretrain_epochs, pipeline::role_seed(c.seed, Role::pretrain)));
    store_adapted(trained, config.adapter_file);

    PretrainSummary out;
    out.initial_loss = mean_test_loss(scratch, pool);
    out.final_loss = mean_test_loss(trained, pool);
    out.adapters = io::collect_adapters(trained).size();
    return out;
}

AdaptSummary adapt(const config::RunConfig& config, std::size_t index) {
    const pipeline::ExperimentConfig& c = config.experiment;
    pipeline::validate(c);
    const net::ToyModel teacher = pipeline::make_teacher(c, c.seed);
    const pipeline::SpeakerTask speaker = pipeline::test_speaker(c, c.seed, teacher, index);
    const net::ToyModel start = load_adapted(config, config.adapter_file);
    const net::ToyModel adapted = pipeline::stage3_adapt(
        start, speaker,
        pipeline::lora_config(c, c.adapt_epochs, pipeline::role_seed(c.seed, Role::adapt) ^ speaker.id));
    store_adapted(adapted, config.speaker_adapter_file);
    return {speaker.id, net::evaluate(start, speaker.test), net::evaluate(adapted, speaker.test)};
}

EvalSummary evaluate(const config::RunConfig& config) {
    const pipeline::ExperimentConfig& c = config.experiment;
    pipeline::validate(c);
    const net::ToyModel teacher = pipeline::make_teacher(c, c.seed);
    const net::ToyModel base = io::model_from_checkpoint(io::load_checkpoint(config.base_checkpoint));
    const net::ToyModel quantized = io::model_from_checkpoint(io::load_checkpoint(config.quant_checkpoint));
    std::optional<net::ToyModel> adapted;
    if (std::filesystem::exists(config.adapter_file)) adapted = load_adapted(config, config.adapter_file);

    EvalSummary out;
    const net::Dataset clean = pipeline::clean_test_set(c, c.seed, teacher);
    out.clean_fp32 = net::evaluate(base, clean);
    out.clean_quantized = net::evaluate(quantized, clean);
    for (std::size_t i = 0; i < c.test_speakers; ++i) {
        const pipeline::SpeakerTask speaker = pipeline::test_speaker(c, c.seed, teacher, i);
        EvalRow row{speaker.id, net::evaluate(quantized, speaker.test), std::nullopt};
        if (adapted) row.adapted_loss = net::evaluate(*adapted, speaker.test);
        out.speakers.push_back(row);
    }
    return out;
}

}  // namespace p4q::stages
