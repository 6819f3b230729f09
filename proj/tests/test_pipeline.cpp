// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>

#include "p4q/checkpoint.hpp"
#include "p4q/error.hpp"
#include "p4q/pipeline.hpp"

using namespace p4q;
using namespace p4q::pipeline;

namespace {

template <class F>
ErrorKind kind_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::io;
}

// Small enough to run a whole benchmark in well under a second.
ExperimentConfig tiny() {
    ExperimentConfig c;
    c.shape = {6, 8, 3};
    c.batch_size = 8;
    c.pretrain_speakers = 3;
    c.test_speakers = 2;
    c.train_samples = 32;
    c.test_samples = 32;
    c.base_samples = 64;
    c.base_epochs = 5;
    c.pretrain_epochs = 3;
    c.adapt_epochs = 3;
    c.rank = 2;
    c.alpha = 4.0;
    c.block_size = 16;
    c.seeds = 2;
    return c;
}

std::vector<std::uint8_t> bytes_of(const net::ToyModel& m) {
    return io::encode_checkpoint(io::model_to_checkpoint(m));
}

}  // namespace

TEST_CASE("config validation") {
    validate(ExperimentConfig{});
    ExperimentConfig c;
    c.bits = 1;
    CHECK(kind_of([&] { validate(c); }) == ErrorKind::parameter);
    c = {};
    c.rank = 17;
    CHECK(kind_of([&] { validate(c); }) == ErrorKind::parameter);
    c = {};
    c.domain_share = -0.1;
    CHECK(kind_of([&] { validate(c); }) == ErrorKind::parameter);
    c = {};
    c.seeds = 0;
    CHECK(kind_of([&] { validate(c); }) == ErrorKind::parameter);
}

TEST_CASE("speaker generation") {
    const ExperimentConfig c = tiny();
    const net::ToyModel teacher = make_teacher(c, 1);
    const auto a = gen_speakers(5, 3, 0.5, 16, 8, teacher, 8, 0, 0.5);
    const auto b = gen_speakers(5, 3, 0.5, 16, 8, teacher, 8, 0, 0.5);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a[i].id == i);
        CHECK(a[i].transform == b[i].transform);
        CHECK(a[i].offset == b[i].offset);
        CHECK(a[i].train.size() == 2);
        CHECK(net::sample_count(a[i].test) == 8);
    }
    CHECK(!(a[0].transform == a[1].transform));

    // Shifted ids give different speakers.
    const auto later = gen_speakers(5, 1, 0.5, 16, 8, teacher, 8, 3, 0.5);
    CHECK(later[0].id == 3);
    for (const auto& s : a) CHECK(!(s.transform == later[0].transform));

    // No shift: identity transform, zero offset, targets are the teacher on the inputs.
    for (const auto& s : gen_speakers(5, 2, 0.0, 16, 8, teacher, 8, 0, 0.5)) {
        CHECK(s.transform == Matrix::identity(6));
        CHECK(s.offset == Matrix(6, 1));
        for (const auto& batch : s.train) CHECK(net::forward(teacher, batch.x) == batch.y);
    }

    // A fully shared domain makes every speaker identical in distribution.
    const auto shared = gen_speakers(5, 3, 0.5, 16, 8, teacher, 8, 0, 1.0);
    CHECK(shared[0].transform == shared[1].transform);
    CHECK(shared[1].offset == shared[2].offset);
}

TEST_CASE("stages") {
    const ExperimentConfig c = tiny();
    const SeedSetup s = prepare_seed(c, 3);
    CHECK(s.quantized.is_quantized());
    CHECK(kind_of([&] { stage1_quantize(s.quantized, 4, 16); }) == ErrorKind::parameter);
    CHECK(s.pool.size() == 3);
    CHECK(s.test.size() == 2);
    // Pool and test speakers never share an id.
    for (const auto& p : s.pool)
        for (const auto& t : s.test) CHECK(p.id != t.id);

    const auto pretrained_bytes = bytes_of(s.pretrained);
    const auto pretrained_adapters = io::collect_adapters(s.pretrained);
    const auto quantized_bytes = bytes_of(s.quantized);

    const net::ToyModel same = stage3_adapt(s.pretrained, s.test[0], lora_config(c, 0, 1));
    CHECK(bytes_of(same) == pretrained_bytes);
    CHECK(io::collect_adapters(same) == pretrained_adapters);

    const net::ToyModel a0 = stage3_adapt(s.pretrained, s.test[0], lora_config(c, 3, 1));
    const net::ToyModel a1 = stage3_adapt(s.pretrained, s.test[1], lora_config(c, 3, 1));
    CHECK(!(io::collect_adapters(a0) == io::collect_adapters(a1)));
    // Adapting never touches the shared model or the quantized base.
    CHECK(io::collect_adapters(s.pretrained) == pretrained_adapters);
    CHECK(bytes_of(s.quantized) == quantized_bytes);
    for (std::size_t i = 0; i < a0.weights().size(); ++i)
        CHECK(*a0.weights()[i].second->quantized == *s.quantized.weights()[i].second->quantized);
    // Re-running is deterministic.
    CHECK(io::collect_adapters(stage3_adapt(s.pretrained, s.test[0], lora_config(c, 3, 1))) ==
          io::collect_adapters(a0));

    const net::ToyModel thawed = to_full_precision(s.quantized);
    CHECK(!thawed.is_quantized());
    CHECK(thawed.weights()[0].second->value == s.quantized.weights()[0].second->value);
}

TEST_CASE("benchmark report structure") {
    const ExperimentConfig c = tiny();
    const ExperimentReport r = run_benchmark(c);
    CHECK(r.records.size() == 5 * 2 * 2);
    CHECK(std::is_sorted(r.records.begin(), r.records.end(), [](const Record& a, const Record& b) {
        return std::tie(a.system, a.seed, a.speaker) < std::tie(b.system, b.seed, b.speaker);
    }));
    REQUIRE(r.systems.size() == 5);
    CHECK(r.systems[0].system == System::baseline_nf4);
    CHECK(r.systems[0].relative_reduction_pct == 0.0);
    REQUIRE(r.seeds.size() == 2);
    CHECK(r.seeds[0].seed == 1);
    CHECK(r.seeds[1].seed == 2);
    for (std::size_t k = 0; k < 5; ++k) {
        double mean = 0.0;
        for (const auto& sr : r.seeds) mean += sr.mean_loss[k];
        CHECK(r.systems[k].mean == doctest::Approx(mean / 2.0));
    }
    CHECK(r.quantized_model_bytes < r.fp32_model_bytes);
    CHECK(r.adapter_fraction == doctest::Approx(static_cast<double>(r.adapter_scalars) /
                                                 static_cast<double>(r.base_weight_scalars)));
    CHECK(render_table(r) == render_table(run_benchmark(c)));
    const std::string csv = render_records(r);
    CHECK(csv.rfind("system,seed,speaker,loss\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 21);
}

TEST_CASE("shift raises the unadapted loss") {
    ExperimentConfig c = tiny();
    c.base_epochs = 30;
    c.seeds = 1;
    c.epsilon = 0.0;
    std::vector<Record> rec0, rec1;
    const SeedResult none = run_seed(c, 1, rec0);
    c.epsilon = 0.5;
    const SeedResult shifted = run_seed(c, 1, rec1);
    CHECK(shifted.mean_loss[0] > none.mean_loss[0]);
    // Without a shift every speaker sees the base's own distribution.
    CHECK(none.fp32_reference == doctest::Approx(none.clean_fp32).epsilon(0.5));
}
