#include "nfaseg/network.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "nfaseg/checkpoint.hpp"
#include "nfaseg/rng.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace nfaseg;

namespace {

TensorPtr random_image(long n, long c, long h, long w, unsigned long long seed) {
    auto x = Tensor::create(Shape{n, c, h, w}, 0.0, false);
    Rng rng(seed);
    for (auto& v : x->data) v = rng.normal();
    return x;
}

NetworkSpec default_spec() { return NetworkSpec{}; }

}  // namespace

TEST(Network, ForwardShapeContractAndScoreRange) {
    Network net(default_spec(), 11);
    auto x = random_image(2, 1, 64, 64, 3);
    auto out = net.forward(x, true);

    EXPECT_EQ(out.scores->shape, (Shape{2, 1, 64, 64}));
    for (double v : out.scores->data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    ASSERT_EQ(out.maps.size(), 3u);
    for (const auto& m : out.maps) EXPECT_EQ(m.values->shape, (Shape{2, 1, 64, 64}));
    EXPECT_DOUBLE_EQ(out.maps[0].n_test, 64.0 * 64.0);
    EXPECT_DOUBLE_EQ(out.maps[1].n_test, 32.0 * 32.0);
    EXPECT_DOUBLE_EQ(out.maps[2].n_test, 16.0 * 16.0);
    EXPECT_EQ(out.maps[0].scale_index, 0L);
    EXPECT_EQ(out.maps[1].scale_index, 1L);
    EXPECT_EQ(out.maps[2].scale_index, 2L);
    EXPECT_DOUBLE_EQ(out.fused.n_test, 64.0 * 64.0);
}

TEST(Network, IndivisibleInputNamesRequiredDivisor) {
    Network net(default_spec(), 1);
    auto x = random_image(1, 1, 50, 50, 4);
    try {
        net.forward(x, false);
        FAIL() << "expected parameter error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Parameter);
        EXPECT_NE(std::string(e.what()).find("divisible by 4"), std::string::npos)
            << e.what();
    }
}

TEST(Network, WrongChannelCountRejected) {
    Network net(default_spec(), 1);
    auto x = random_image(1, 3, 32, 32, 4);
    test_util::expect_error([&] { net.forward(x, false); }, ErrorCode::Parameter);
}

TEST(Network, SpecValidation) {
    NetworkSpec bad = default_spec();
    bad.channels = {8, 16};  // two entries for three levels
    test_util::expect_error([&] { Network net(bad, 1); }, ErrorCode::Parameter);

    bad = default_spec();
    bad.window = 4;
    bad.use_spatial = true;
    test_util::expect_error([&] { Network net(bad, 1); }, ErrorCode::Parameter);
}

TEST(Network, PlainHeadShapeAndParamSet) {
    NetworkSpec spec = default_spec();
    spec.head = HeadKind::Plain;
    Network net(spec, 5);
    auto x = random_image(1, 1, 32, 32, 9);
    auto out = net.forward(x, true);
    EXPECT_EQ(out.scores->shape, (Shape{1, 1, 32, 32}));
    EXPECT_TRUE(out.maps.empty());
    for (double v : out.scores->data) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    EXPECT_NO_THROW(net.parameter("head.weight"));
    test_util::expect_error([&] { net.parameter("nfa0.block1.weight"); },
                            ErrorCode::Parameter);
}

TEST(Network, NfaHeadParameterBudgetUnderFivePercentOfTrunk) {
    Network nfa_net(default_spec(), 2);
    NetworkSpec plain = default_spec();
    plain.head = HeadKind::Plain;
    Network plain_net(plain, 2);

    EXPECT_EQ(nfa_net.trunk_param_count(), plain_net.trunk_param_count());
    const long extra = nfa_net.head_param_count() - plain_net.head_param_count();
    EXPECT_GT(extra, 0);
    EXPECT_LT(static_cast<double>(extra),
              0.05 * static_cast<double>(nfa_net.trunk_param_count()))
        << "head adds " << extra << " params over plain, trunk has "
        << nfa_net.trunk_param_count();
}

TEST(Network, DeterministicInitialization) {
    Network a(default_spec(), 42);
    Network b(default_spec(), 42);
    Network c(default_spec(), 43);
    ASSERT_EQ(a.parameters().size(), b.parameters().size());
    bool any_differs_from_c = false;
    for (size_t i = 0; i < a.parameters().size(); ++i) {
        EXPECT_EQ(a.parameters()[i].first, b.parameters()[i].first);
        EXPECT_EQ(a.parameters()[i].second->data, b.parameters()[i].second->data);
        if (a.parameters()[i].second->data != c.parameters()[i].second->data)
            any_differs_from_c = true;
    }
    EXPECT_TRUE(any_differs_from_c);
}

TEST(Network, MultiscaleOffScoresOnlyFinestScale) {
    NetworkSpec spec = default_spec();
    spec.multiscale = false;
    Network net(spec, 13);
    auto x = random_image(1, 1, 32, 32, 8);
    auto out = net.forward(x, true);
    ASSERT_EQ(out.maps.size(), 1u);
    EXPECT_EQ(out.maps[0].scale_index, 0L);
    EXPECT_DOUBLE_EQ(out.maps[0].n_test, 32.0 * 32.0);
    test_util::expect_error([&] { net.parameter("nfa1.block1.weight"); },
                            ErrorCode::Parameter);
}

TEST(Network, SingleLevelNetworkWorks) {
    NetworkSpec spec;
    spec.levels = 1;
    spec.channels = {4};
    Network net(spec, 3);
    auto x = random_image(1, 1, 8, 8, 6);  // no divisibility requirement at one level
    auto out = net.forward(x, true);
    EXPECT_EQ(out.scores->shape, (Shape{1, 1, 8, 8}));
    ASSERT_EQ(out.maps.size(), 1u);
    EXPECT_DOUBLE_EQ(out.maps[0].n_test, 64.0);
}

// Full-model gradient check: statistics of the naive models are constants of
// the backward pass, so finite differences rerun the forward with the models
// frozen at their unperturbed estimates.
TEST(Network, FullModelLossGradientMatchesFiniteDifferences) {
    NetworkSpec spec = default_spec();
    spec.use_spatial = true;  // exercise attention inside the full graph
    Network net(spec, 17);
    auto x = random_image(1, 1, 16, 16, 23);

    auto run = [&](const std::vector<NaiveModel>* frozen,
                   std::vector<NaiveModel>* estimated) {
        auto out = net.forward(x, true, frozen, estimated);
        return sum_all(out.scores);
    };

    std::vector<NaiveModel> models;
    auto loss = run(nullptr, &models);
    ASSERT_EQ(models.size(), 4u);  // three scales plus the spatial map
    backward(loss);

    struct Probe {
        const char* name;
        long index;
    };
    const Probe probes[] = {
        {"enc0.block1.weight", 3}, {"dec0.block.weight", 11},
        {"nfa0.block1.weight", 5}, {"spatial.wq", 1},
        {"eca.kernel", 0},
    };
    const double step = 1e-5;
    for (const auto& probe : probes) {
        auto p = net.parameter(probe.name);
        ASSERT_LT(probe.index, p->shape.numel());
        const double analytic = p->grad[probe.index];
        const double saved = p->data[probe.index];
        p->data[probe.index] = saved + step;
        const double up = run(&models, nullptr)->data[0];
        p->data[probe.index] = saved - step;
        const double down = run(&models, nullptr)->data[0];
        p->data[probe.index] = saved;
        const double fd = (up - down) / (2.0 * step);
        EXPECT_LT(oracles::mixed_error(analytic, fd), 1e-3)
            << probe.name << "[" << probe.index << "]: analytic " << analytic
            << " vs fd " << fd;
    }
}

namespace {

std::string temp_path(const std::string& stem) {
    return ::testing::TempDir() + "/" + stem;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Builds a network with exercised batch-norm statistics and a fabricated
// optimizer state, so every checkpoint field is nontrivial.
struct CheckpointFixture {
    NetworkSpec spec;
    Network net;
    CheckpointMeta meta;
    std::map<std::string, std::vector<double>> opt;

    CheckpointFixture()
        : spec([] {
              NetworkSpec s;
              s.use_spatial = true;
              return s;
          }()),
          net(spec, 19) {
        auto x = random_image(2, 1, 16, 16, 31);
        (void)net.forward(x, true);
        Rng rng(77);
        for (const auto& [name, t] : net.parameters()) {
            std::vector<double> acc(t->data.size());
            for (auto& v : acc) v = rng.uniform();
            opt[name] = acc;
        }
        meta.epoch = 12;
        meta.seed = 0x123456789abcdef0ULL;
        meta.best_val = 0.8125;
    }
};

}  // namespace

TEST(Checkpoint, RoundTripIsBitIdentical) {
    CheckpointFixture fx;
    const auto path = temp_path("roundtrip.dnfa");
    save_checkpoint(path, fx.net, fx.meta, &fx.opt);

    auto loaded = load_checkpoint(path);
    EXPECT_EQ(loaded.meta.epoch, fx.meta.epoch);
    EXPECT_EQ(loaded.meta.seed, fx.meta.seed);
    EXPECT_DOUBLE_EQ(loaded.meta.best_val, fx.meta.best_val);
    EXPECT_EQ(loaded.spec.levels, fx.spec.levels);
    EXPECT_EQ(loaded.spec.channels, fx.spec.channels);
    EXPECT_TRUE(loaded.spec.use_spatial);
    EXPECT_EQ(static_cast<int>(loaded.spec.form), static_cast<int>(fx.spec.form));

    ASSERT_EQ(loaded.network->parameters().size(), fx.net.parameters().size());
    for (size_t i = 0; i < fx.net.parameters().size(); ++i) {
        EXPECT_EQ(loaded.network->parameters()[i].first, fx.net.parameters()[i].first);
        EXPECT_EQ(loaded.network->parameters()[i].second->data,
                  fx.net.parameters()[i].second->data);
    }
    auto got_bn = loaded.network->bn_states();
    auto want_bn = fx.net.bn_states();
    ASSERT_EQ(got_bn.size(), want_bn.size());
    for (size_t i = 0; i < want_bn.size(); ++i) {
        EXPECT_EQ(got_bn[i].second->running_mean, want_bn[i].second->running_mean);
        EXPECT_EQ(got_bn[i].second->running_var, want_bn[i].second->running_var);
    }
    EXPECT_EQ(loaded.opt_acc, fx.opt);

    // saving the loaded state reproduces the file byte for byte
    const auto path2 = temp_path("roundtrip2.dnfa");
    save_checkpoint(path2, *loaded.network, loaded.meta, &loaded.opt_acc);
    EXPECT_EQ(read_file(path), read_file(path2));
}

TEST(Checkpoint, TruncatedFileIsFormatError) {
    CheckpointFixture fx;
    const auto path = temp_path("trunc.dnfa");
    save_checkpoint(path, fx.net, fx.meta, &fx.opt);
    const auto bytes = read_file(path);

    for (size_t keep : {size_t{3}, size_t{10}, bytes.size() / 2, bytes.size() - 5}) {
        const auto cut = temp_path("trunc_cut.dnfa");
        write_file(cut, bytes.substr(0, keep));
        test_util::expect_error([&] { (void)load_checkpoint(cut); }, ErrorCode::Format);
    }
}

TEST(Checkpoint, BadMagicIsFormatError) {
    CheckpointFixture fx;
    const auto path = temp_path("magic.dnfa");
    save_checkpoint(path, fx.net, fx.meta, nullptr);
    auto bytes = read_file(path);
    bytes[0] = 'X';
    write_file(path, bytes);
    test_util::expect_error([&] { (void)load_checkpoint(path); }, ErrorCode::Format);
}

TEST(Checkpoint, UnsupportedVersionIsFormatError) {
    CheckpointFixture fx;
    const auto path = temp_path("version.dnfa");
    save_checkpoint(path, fx.net, fx.meta, nullptr);
    auto bytes = read_file(path);
    bytes[4] = 2;  // little-endian low byte of the version field
    write_file(path, bytes);
    try {
        (void)load_checkpoint(path);
        FAIL() << "expected format error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Format);
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
}

TEST(Checkpoint, CorruptPayloadFailsCrc) {
    CheckpointFixture fx;
    const auto path = temp_path("crc.dnfa");
    save_checkpoint(path, fx.net, fx.meta, nullptr);
    auto bytes = read_file(path);
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
    write_file(path, bytes);
    try {
        (void)load_checkpoint(path);
        FAIL() << "expected format error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Format);
        EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos);
    }
}

TEST(Checkpoint, ShapeMismatchIsFormatError) {
    CheckpointFixture fx;
    const auto path = temp_path("shape.dnfa");
    save_checkpoint(path, fx.net, fx.meta, nullptr);
    auto bytes = read_file(path);

    // swap the first two dims of enc0.block1.weight (u32s after name + dtype +
    // rank): (8,1,3,3) -> (1,8,3,3) changes the shape but not the data length
    const std::string name = "enc0.block1.weight";
    const auto at = bytes.find(name);
    ASSERT_NE(at, std::string::npos);
    const size_t dims_at = at + name.size() + 2;
    ASSERT_EQ(bytes[dims_at], 8);
    ASSERT_EQ(bytes[dims_at + 4], 1);
    bytes[dims_at] = 1;
    bytes[dims_at + 4] = 8;

    // recompute the CRC footer over the payload
    const size_t payload_begin = 6;
    const size_t payload_end = bytes.size() - 4;
    auto crc = ::crc32(::crc32(0L, nullptr, 0),
                       reinterpret_cast<const unsigned char*>(bytes.data() + payload_begin),
                       static_cast<uInt>(payload_end - payload_begin));
    for (int i = 0; i < 4; ++i)
        bytes[payload_end + i] = static_cast<char>((crc >> (8 * i)) & 0xff);
    write_file(path, bytes);

    try {
        (void)load_checkpoint(path);
        FAIL() << "expected format error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Format);
        EXPECT_NE(std::string(e.what()).find("shape"), std::string::npos) << e.what();
    }
}
