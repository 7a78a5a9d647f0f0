#include <gtest/gtest.h>

#include <fstream>

#include "test_support.hpp"

using namespace switchbench;
using namespace testsupport;

namespace {

std::filesystem::path write_file(const std::filesystem::path& dir, const std::string& name,
                                 const std::string& content) {
    const auto p = dir / name;
    std::ofstream out(p, std::ios::binary);
    out << content;
    return p;
}

}  // namespace

TEST(LoadSequence, BasicThreeRowFile) {
    const auto dir = fresh_dir("seq_basic");
    const auto p = write_file(dir, "a.csv",
                              "# label=Crossing\nframe,x,z\n0,1.5,2\n1,1.6,2.1\n2,1.7,2.2\n");
    const TrackSequence seq = load_sequence(p);
    EXPECT_EQ(seq.length(), 3u);
    EXPECT_EQ(seq.label, 1);  // class order fixes Crossing at index 1
    EXPECT_EQ(seq.samples[2].frame, 2);
    EXPECT_NEAR(seq.samples[1].x, 1.6, 1e-15);
    std::filesystem::remove_all(dir);
}

TEST(LoadSequence, NonMonotoneFramesThrow) {
    const auto dir = fresh_dir("seq_frames");
    const auto p = write_file(dir, "a.csv", "# label=Crossing\nframe,x,z\n0,1,1\n2,1,1\n1,1,1\n");
    EXPECT_THROW(load_sequence(p), NonMonotoneFrames);
    std::filesystem::remove_all(dir);
}

TEST(LoadSequence, UnknownLabelThrows) {
    const auto dir = fresh_dir("seq_label");
    const auto p = write_file(dir, "a.csv", "# label=Sprinting\nframe,x,z\n0,1,1\n1,1,1\n");
    EXPECT_THROW(load_sequence(p), UnknownLabel);
    std::filesystem::remove_all(dir);
}

TEST(LoadSequence, ParseErrorsReportLineNumbers) {
    const auto dir = fresh_dir("seq_parse");
    const auto bad_header = write_file(dir, "a.csv", "# label=Crossing\nframe;x;z\n0,1,1\n");
    try {
        load_sequence(bad_header);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
    const auto bad_number = write_file(dir, "b.csv", "# label=Crossing\nframe,x,z\n0,1,1\n1,abc,1\n");
    try {
        load_sequence(bad_number);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos);
    }
    std::filesystem::remove_all(dir);
}

TEST(Manifest, LoadsThirtySixThirtyTwoSplit) {
    // 9 train + 8 test per class makes the 36/32 split.
    const auto dir = fresh_dir("manifest_counts");
    SynthSpec spec = SynthSpec::default_spec(5);
    spec.train_per_class = 9;
    spec.test_per_class = 8;
    for (auto& c : spec.classes) {
        c.len_min = 10;
        c.len_max = 20;
    }
    const auto manifest_path = write_dataset(synthesize(spec), dir);
    const DatasetManifest m = load_manifest(manifest_path);
    EXPECT_EQ(m.train.size(), 36u);
    EXPECT_EQ(m.test.size(), 32u);
    EXPECT_EQ(m.class_names, default_class_names());
    std::filesystem::remove_all(dir);
}

TEST(Manifest, EmptyTrainSplitIsParseError) {
    const auto dir = fresh_dir("manifest_empty");
    const auto p = write_file(dir, "manifest.txt",
                              "classes=BendingIn,Crossing,Starting,Stopping\n[train]\n[test]\n");
    try {
        load_manifest(p);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("train split empty"), std::string::npos);
    }
    std::filesystem::remove_all(dir);
}

TEST(Manifest, DuplicatePathAcrossSplitsThrows) {
    const auto dir = fresh_dir("manifest_dup");
    write_file(dir, "a.csv", "# label=Crossing\nframe,x,z\n0,1,1\n1,1,1\n");
    const auto p = write_file(dir, "manifest.txt",
                              "classes=BendingIn,Crossing,Starting,Stopping\n[train]\na.csv\n[test]\na.csv\n");
    EXPECT_THROW(load_manifest(p), DuplicatePath);
    std::filesystem::remove_all(dir);
}

TEST(Manifest, MissingFileThrows) {
    const auto dir = fresh_dir("manifest_missing");
    const auto p = write_file(dir, "manifest.txt",
                              "classes=BendingIn,Crossing,Starting,Stopping\n[train]\nnope.csv\n");
    EXPECT_THROW(load_manifest(p), MissingFile);
    std::filesystem::remove_all(dir);
}

TEST(Synthesize, DeterministicOnDiskBytes) {
    SynthSpec spec = SynthSpec::default_spec(77);
    spec.train_per_class = 2;
    spec.test_per_class = 1;
    for (auto& c : spec.classes) {
        c.len_min = 10;
        c.len_max = 30;
    }
    const auto d1 = fresh_dir("synth_a");
    const auto d2 = fresh_dir("synth_b");
    write_dataset(synthesize(spec), d1);
    write_dataset(synthesize(spec), d2);
    EXPECT_EQ(tree_bytes(d1), tree_bytes(d2));
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
}

TEST(Synthesize, NoiselessCrossingIsStraightLine) {
    SynthSpec spec = SynthSpec::default_spec(3);
    spec.train_per_class = 1;
    spec.test_per_class = 1;
    auto& crossing = spec.classes[1];
    crossing.accel_noise_x = 1e-30;
    crossing.accel_noise_z = 1e-30;
    crossing.obs_noise = 1e-30;
    crossing.init_std.setZero();
    crossing.init_mean[4] = 0.0;  // no acceleration
    crossing.init_mean[5] = 0.0;
    const SynthResult ds = synthesize(spec);
    const TrackSequence& seq = ds.train[1 * spec.train_per_class];  // first Crossing sequence
    ASSERT_EQ(seq.label, 1);
    // Least-squares linear fit of x(t) and z(t); residuals must vanish.
    const auto T = static_cast<Eigen::Index>(seq.length());
    Matrix design(T, 2);
    Matrix target(T, 2);
    for (Eigen::Index t = 0; t < T; ++t) {
        design(t, 0) = 1.0;
        design(t, 1) = static_cast<double>(seq.samples[static_cast<std::size_t>(t)].frame);
        target(t, 0) = seq.samples[static_cast<std::size_t>(t)].x;
        target(t, 1) = seq.samples[static_cast<std::size_t>(t)].z;
    }
    const Matrix coeff = (design.transpose() * design).ldlt().solve(design.transpose() * target);
    const Matrix residual = target - design * coeff;
    EXPECT_LT(residual.cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Synthesize, GroundTruthSeparatesClassesOnShortPrefix) {
    // The generating model itself must put the highest filtered posterior on
    // the true class for nearly all length-6 prefixes.
    const SynthResult ds = synthesize(SynthSpec::default_spec(11));
    const SldsParams& truth = ds.ground_truth.front();
    int correct = 0, total = 0;
    auto check = [&](const std::vector<TrackSequence>& seqs) {
        for (const auto& seq : seqs) {
            std::vector<Vector> obs = to_observations(truncate(seq, 6));
            const auto [post, ll] = exact_enumeration_filter(truth, obs);
            Eigen::Index best;
            post.row(post.rows() - 1).maxCoeff(&best);
            correct += static_cast<int>(best) == seq.label ? 1 : 0;
            ++total;
            (void)ll;
        }
    };
    check(ds.train);
    check(ds.test);
    EXPECT_GE(static_cast<double>(correct) / total, 0.9);
}

TEST(Standardize, ConstantCoordinateIsFloored) {
    TrackSequence seq;
    seq.id = "c";
    seq.label = 0;
    for (int t = 0; t < 5; ++t)
        seq.samples.push_back({t, 2.5, 3.0 + t});
    const FeatureTransform tf = standardize({seq});
    EXPECT_NEAR(tf.std[0], 1e-6, 1e-18);
    const auto feats = to_features(seq, tf);
    for (const auto& f : feats)
        EXPECT_NEAR(f[0], 0.0, 1e-9);
}

TEST(Standardize, IdempotentOnOwnOutput) {
    SynthSpec spec = SynthSpec::default_spec(13);
    spec.train_per_class = 2;
    spec.test_per_class = 1;
    const SynthResult ds = synthesize(spec);
    const FeatureTransform tf = standardize(ds.train);
    std::vector<TrackSequence> transformed = ds.train;
    for (auto& seq : transformed)
        for (auto& s : seq.samples) {
            Vector v(2);
            v << s.x, s.z;
            const Vector w = tf.apply(v);
            s.x = w[0];
            s.z = w[1];
        }
    const FeatureTransform tf2 = standardize(transformed);
    EXPECT_LT(tf2.mean.cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((tf2.std - Vector::Ones(2)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Standardize, RoundTripInverts) {
    auto rng = make_rng(140);
    SynthSpec spec = SynthSpec::default_spec(14);
    spec.train_per_class = 2;
    spec.test_per_class = 1;
    const SynthResult ds = synthesize(spec);
    const FeatureTransform tf = standardize(ds.train);
    for (int rep = 0; rep < 20; ++rep) {
        const Vector v = random_vector(rng, 2, 10.0);
        EXPECT_LT((tf.invert(tf.apply(v)) - v).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Standardize, UsesTrainSplitOnly) {
    SynthSpec spec = SynthSpec::default_spec(15);
    spec.train_per_class = 2;
    spec.test_per_class = 2;
    const SynthResult ds = synthesize(spec);
    const FeatureTransform tf = standardize(ds.train);

    // Hand recomputation over the train split.
    double sx = 0, sz = 0, n = 0;
    for (const auto& seq : ds.train)
        for (const auto& s : seq.samples) {
            sx += s.x;
            sz += s.z;
            n += 1;
        }
    EXPECT_NEAR(tf.mean[0], sx / n, 1e-12);
    EXPECT_NEAR(tf.mean[1], sz / n, 1e-12);

    // Adding the test split would give different constants.
    std::vector<TrackSequence> all = ds.train;
    all.insert(all.end(), ds.test.begin(), ds.test.end());
    const FeatureTransform leaked = standardize(all);
    EXPECT_NE(leaked.mean[1], tf.mean[1]);
}

TEST(RoundTrip, CanonicalFilesRewriteByteIdentically) {
    SynthSpec spec = SynthSpec::default_spec(16);
    spec.train_per_class = 2;
    spec.test_per_class = 1;
    const auto dir = fresh_dir("roundtrip");
    write_dataset(synthesize(spec), dir);
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
        if (entry.path().extension() != ".csv")
            continue;
        const TrackSequence seq = load_sequence(entry.path());
        const auto copy = dir / "copy.csv";
        write_sequence(copy, seq);
        std::ifstream a(entry.path(), std::ios::binary), b(copy, std::ios::binary);
        std::stringstream sa, sb;
        sa << a.rdbuf();
        sb << b.rdbuf();
        EXPECT_EQ(sa.str(), sb.str()) << entry.path();
    }
    std::filesystem::remove_all(dir);
}

TEST(Observations, ConversionKeepsCoordinates) {
    TrackSequence seq;
    seq.id = "t";
    seq.label = 2;
    seq.samples = {{0, 1.0, 2.0}, {1, 3.0, 4.0}};
    const auto obs = to_observations(seq);
    ASSERT_EQ(obs.size(), 2u);
    EXPECT_EQ(obs[1][0], 3.0);
    EXPECT_EQ(obs[1][1], 4.0);
}
