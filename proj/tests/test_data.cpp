#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "helpers.hpp"
#include "loopmem/data.hpp"
#include "loopmem/run_config.hpp"

using namespace loopmem;
using loopmem::testing::TempDir;

namespace {

std::vector<TokenId> ramp(std::size_t n) {
    std::vector<TokenId> t(n);
    for (std::size_t i = 0; i < n; ++i) {
        t[i] = static_cast<TokenId>(i % 251);
    }
    return t;
}

void write(const std::filesystem::path& p, const std::string& text) {
    std::ofstream(p, std::ios::binary) << text;
}

}  // namespace

TEST(Tokenizer, AsciiAndBos) {
    EXPECT_EQ(tokenize_bytes("AB"), (std::vector<TokenId>{kBosToken, 65, 66}));
    EXPECT_EQ(tokenize_bytes(""), (std::vector<TokenId>{kBosToken}));
}

TEST(Tokenizer, Utf8BytesAreSeparateTokens) {
    EXPECT_EQ(tokenize_bytes("\xC3\xA9"), (std::vector<TokenId>{kBosToken, 0xC3, 0xA9}));
}

TEST(Tokenizer, RoundTripOverArbitraryBytes) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        std::string s(rng.below(40), '\0');
        for (char& c : s) {
            c = static_cast<char>(rng.below(256));
        }
        EXPECT_EQ(detokenize(tokenize_bytes(s)), s);
    }
    EXPECT_THROW(detokenize(std::vector<TokenId>{300}), IndexError);
}

TEST(Corpus, DocumentsAreBosSeparated) {
    std::vector<std::string> docs{"ab", "", "xyz"};
    Corpus c = Corpus::from_texts(docs);
    EXPECT_EQ(c.tokens, (std::vector<TokenId>{256, 97, 98, 256, 256, 120, 121, 122}));
    EXPECT_EQ(c.doc_offsets, (std::vector<std::size_t>{0, 3, 4}));
}

TEST(Corpus, FilesAreRecordedInTheManifest) {
    TempDir dir("corpus");
    write(dir / "a.txt", "hello");
    write(dir / "b.txt", "\xC3\xA9");
    std::vector<std::filesystem::path> files{dir / "a.txt", dir / "b.txt"};
    Corpus c = Corpus::from_files(files);
    ASSERT_EQ(c.manifest.size(), 2u);
    EXPECT_EQ(c.manifest[0].bytes, 5u);
    EXPECT_EQ(c.manifest[1].bytes, 2u);
    EXPECT_EQ(c.tokens.size(), 9u);
    std::vector<std::filesystem::path> missing{dir / "nope.txt"};
    EXPECT_THROW(Corpus::from_files(missing), IoError);
}

TEST(BatchIterator, BatchesPerEpoch) {
    EXPECT_EQ(BatchIterator(ramp(1025), 2, 32, 0).batches_per_epoch(), 16u);
    EXPECT_EQ(BatchIterator(ramp(1024), 2, 32, 0).batches_per_epoch(), 15u);
    EXPECT_EQ(BatchIterator(ramp(65), 2, 32, 0).batches_per_epoch(), 1u);
}

TEST(BatchIterator, TooSmallCorpusStatesTheRequirement) {
    try {
        BatchIterator(ramp(64), 2, 32, 0);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("65"), std::string::npos);
    }
}

TEST(BatchIterator, SameSeedSameSequence) {
    BatchIterator a(ramp(3000), 3, 16, 9);
    BatchIterator b(ramp(3000), 3, 16, 9);
    BatchIterator c(ramp(3000), 3, 16, 10);
    bool differs = false;
    for (int i = 0; i < 200; ++i) {
        TokenBatch x = a.next();
        TokenBatch y = b.next();
        ASSERT_EQ(x.inputs.ids, y.inputs.ids);
        ASSERT_EQ(x.targets.ids, y.targets.ids);
        differs = differs || c.next().inputs.ids != x.inputs.ids;
    }
    EXPECT_TRUE(differs);
    EXPECT_EQ(a.position(), 200u);
}

TEST(BatchIterator, TargetsAreStreamSuccessors) {
    auto tokens = ramp(2000);
    BatchIterator it(tokens, 4, 10, 3);
    for (std::size_t k = 0; k < 2 * it.batches_per_epoch(); ++k) {
        auto starts = it.window_starts(k);
        TokenBatch b = it.batch_at(k);
        EXPECT_EQ(b.inputs.rows, 4u);
        EXPECT_EQ(b.inputs.cols, 10u);
        for (std::size_t r = 0; r < 4; ++r) {
            for (std::size_t t = 0; t < 10; ++t) {
                EXPECT_EQ(b.inputs.ids[r * 10 + t], tokens[starts[r] + t]);
                EXPECT_EQ(b.targets.ids[r * 10 + t], tokens[starts[r] + t + 1]);
            }
            EXPECT_LT(starts[r] + 10, tokens.size());
        }
    }
}

TEST(BatchIterator, EpochWindowsAreDisjointAndCover) {
    const std::size_t n = 1000, bs = 3, t = 7;
    BatchIterator it(ramp(n), bs, t, 4);
    std::set<std::size_t> seen;
    for (std::size_t k = 0; k < it.batches_per_epoch(); ++k) {
        for (std::size_t s : it.window_starts(k)) {
            EXPECT_TRUE(seen.insert(s).second) << "window " << s << " repeated";
        }
    }
    EXPECT_GE(static_cast<double>(seen.size() * t), (1.0 - static_cast<double>(bs * t) / n) * n - t);
    // A new epoch reshuffles.
    std::vector<std::size_t> e0, e1;
    for (std::size_t k = 0; k < it.batches_per_epoch(); ++k) {
        auto a = it.window_starts(k);
        auto b = it.window_starts(k + it.batches_per_epoch());
        e0.insert(e0.end(), a.begin(), a.end());
        e1.insert(e1.end(), b.begin(), b.end());
    }
    EXPECT_NE(e0, e1);
    std::sort(e0.begin(), e0.end());
    std::sort(e1.begin(), e1.end());
    EXPECT_EQ(e0, e1);
}

TEST(BatchIterator, SeekMatchesSequentialAccess) {
    BatchIterator a(ramp(800), 2, 8, 1);
    for (int i = 0; i < 37; ++i) {
        a.next();
    }
    BatchIterator b(ramp(800), 2, 8, 1);
    b.seek(37);
    EXPECT_EQ(a.next().inputs.ids, b.next().inputs.ids);
}

TEST(TokenCache, RoundTripAndLayout) {
    TempDir dir("cache");
    std::vector<TokenId> t{0, 255, 256, 1, 65535};
    write_token_cache(dir / "t.bin", t);
    EXPECT_EQ(std::filesystem::file_size(dir / "t.bin"), 8u + 2u * t.size());
    EXPECT_EQ(read_token_cache(dir / "t.bin"), t);
    std::ifstream in(dir / "t.bin", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    EXPECT_EQ(bytes.substr(0, 8), "LMTOKEN1");
    EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 0x00);
    EXPECT_EQ(static_cast<unsigned char>(bytes[13]), 0x01);
}

TEST(TokenCache, BadFilesAreRejected) {
    TempDir dir("badcache");
    write(dir / "magic.bin", "NOTMAGIC\x01\x00");
    EXPECT_THROW(read_token_cache(dir / "magic.bin"), IoError);
    write(dir / "odd.bin", std::string("LMTOKEN1", 8) + "\x01");
    EXPECT_THROW(read_token_cache(dir / "odd.bin"), IoError);
    EXPECT_THROW(read_token_cache(dir / "absent.bin"), IoError);
    EXPECT_THROW(write_token_cache(dir / "big.bin", std::vector<TokenId>{70000}), IndexError);
}

TEST(RunConfig, RelativePathsAndHeldOutTail) {
    TempDir dir("runcfg");
    std::string text(400, 'q');
    write(dir / "train.txt", text);
    write(dir / "cfg.json", R"({"model": {"preset": "tiny/loop3"}, "train": {"seq_len": 16, "batch_size": 2},
                               "data": {"train": ["train.txt"], "val_fraction": 0.25}, "out_dir": "out"})");
    RunConfig rc = load_run_config(dir / "cfg.json");
    EXPECT_EQ(rc.preset, "tiny/loop3");
    EXPECT_FALSE(rc.model.memory_enabled);
    EXPECT_EQ(rc.train_files.at(0), dir / "train.txt");
    EXPECT_EQ(rc.out_dir, dir / "out");
    rc.validate();
    RunData data = load_run_data(rc);
    EXPECT_EQ(data.train->size() + data.val.size(), 401u);
    EXPECT_EQ(data.val.size(), 100u);
}

TEST(RunConfig, ErrorsNameTheField) {
    TempDir dir("runcfg-bad");
    auto expect_field = [&](const std::string& json, const std::string& field) {
        write(dir / "c.json", json);
        try {
            RunConfig rc = load_run_config(dir / "c.json");
            rc.validate();
            ADD_FAILURE() << "accepted " << json;
        } catch (const ConfigError& e) {
            EXPECT_EQ(e.field(), field) << e.what();
        }
    };
    expect_field(R"({"data": {"train": ["missing.txt"]}})", "data.train[0]");
    expect_field(R"({"data": {"train": []}, "model": {"H": 3}})", "model.H");
    expect_field(R"({"model": {"preset": "nope"}})", "model.preset");
    expect_field(R"({"data": {"train": ["c.json"]}, "train": {"seq_len": 4096}})", "train.seq_len");
    expect_field(R"({"mystery": 1})", "mystery");
}
