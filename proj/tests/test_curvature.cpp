#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "kfcl/fisher.hpp"
#include "kfcl/penalties.hpp"
#include "kfcl/snapshot.hpp"

#include "support.hpp"

using namespace kfcl;
using test_support::random_batch;
using test_support::random_instance;
using test_support::tiny_cnn;
using test_support::tiny_scorer;
using test_support::tiny_transformer;

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
    return m;
}

// Symmetry + eigenvalue positivity to the library's tolerance.
void require_psd(const Tensor& t, const std::string& what) {
    REQUIRE(t.rows() == t.cols());
    double max_asym = 0.0, trace = 0.0;
    for (std::size_t i = 0; i < t.rows(); ++i) {
        trace += t(i, i);
        for (std::size_t j = 0; j < i; ++j)
            max_asym = std::max(max_asym, std::fabs(t(i, j) - t(j, i)));
    }
    INFO(what);
    REQUIRE(max_asym <= 1e-9 * std::max(1.0, trace));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(t));
    REQUIRE(es.eigenvalues().minCoeff() >= -1e-9 * std::max(1.0, trace));
}

// Random symmetric PSD factor of the given size.
Tensor random_psd(std::size_t n, Rng& rng) {
    Tensor b = Tensor::matrix(n, n);
    for (auto& v : b.values()) v = rng.normal();
    Tensor out = Tensor::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += b(i, k) * b(j, k);
            out(i, j) = acc;
        }
    return out;
}

TaskSnapshot snapshot_of(const Model& m, Method method) {
    TaskSnapshot snap;
    snap.task_id = "test";
    snap.method = method;
    snap.mean = m.params;
    return snap;
}

// Per-instance flattened gradient via the (finite-difference verified)
// reverse pass; the building block of the dense Fisher oracles.
std::vector<double> flat_instance_grad(const Model& m, const RankingInstance& inst) {
    const auto [loss, grads] = loss_and_backward(m, {inst});
    (void)loss;
    std::vector<double> flat;
    flatten_params(grads, flat);
    return flat;
}

} // namespace

TEST_CASE("full fisher of one instance is the gradient outer product") {
    Model m = tiny_scorer(51, 3, 4, true);
    Rng rng(9);
    const auto inst = random_instance(m, 1, rng);
    const auto g = flat_instance_grad(m, inst);
    const FullFisher f = estimate_full_fim(m, {inst});
    REQUIRE(f.n() == g.size());
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < g.size(); ++j)
            REQUIRE_THAT(f.matrix(i, j), Catch::Matchers::WithinAbs(g[i] * g[j], 1e-12));

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(f.matrix));
    const auto& sv = svd.singularValues();
    for (int i = 1; i < sv.size(); ++i) REQUIRE(sv(i) <= 1e-10 * sv(0));  // rank <= 1
}

TEST_CASE("full fisher is symmetric PSD with rank bounded by the sample count") {
    Model m = tiny_scorer(52, 3, 5, true);
    REQUIRE(m.total_params() <= 50);
    Rng rng(10);
    const auto data = random_batch(m, 1, 8, rng);
    const FullFisher f = estimate_full_fim(m, data);
    require_psd(f.matrix, "full fisher");

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(f.matrix));
    const auto& sv = svd.singularValues();
    std::size_t rank = 0;
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > 1e-10 * sv(0)) ++rank;
    REQUIRE(rank <= 8);
}

TEST_CASE("full fisher refuses models above the oracle cap") {
    Model m = tiny_cnn(53);
    Rng rng(11);
    const auto data = random_batch(m, 5, 2, rng);
    REQUIRE_THROWS_AS(estimate_full_fim(m, data, 10), OracleScaleError);
    REQUIRE_THROWS_AS(estimate_full_fim(m, {}), UsageError);
}

TEST_CASE("diagonal fisher equals the diagonal of the full fisher") {
    Model m = tiny_cnn(54, 10, 4, 3, 3);
    REQUIRE(m.total_params() <= 500);
    Rng rng(12);
    const auto data = random_batch(m, 5, 64, rng);
    const DiagFisher d = estimate_diag_fim(m, data);
    const FullFisher f = estimate_full_fim(m, data);
    std::vector<double> flat;
    flatten_params(d.diag, flat);
    for (std::size_t i = 0; i < flat.size(); ++i) {
        const double denom = std::max({std::fabs(flat[i]), std::fabs(f.matrix(i, i)), 1e-300});
        REQUIRE(std::fabs(flat[i] - f.matrix(i, i)) / denom < 1e-10);
    }
    for (const auto& t : d.diag)
        for (double v : t.values()) REQUIRE(v >= 0.0);
}

TEST_CASE("diagonal fisher is zero at a stationary point") {
    // Zero candidate features give identically zero scores for any weights,
    // so every gradient vanishes.
    Model m = tiny_scorer(55, 3, 4, false);
    RankingInstance inst;
    inst.candidates = Tensor::matrix(3, 4);
    inst.positive = 1;
    const DiagFisher d = estimate_diag_fim(m, {inst});
    for (const auto& t : d.diag)
        for (double v : t.values()) REQUIRE(v == 0.0);
}

TEST_CASE("diagonal entries are squared per-instance gradients") {
    Model m = tiny_scorer(56, 2, 2, false);
    RankingInstance inst;
    inst.candidates = Tensor::matrix(2, 2);
    inst.candidates(0, 0) = 1.0;  // x = [1, 0]; second candidate all zero
    inst.positive = 0;
    const auto g = flat_instance_grad(m, inst);
    const DiagFisher d = estimate_diag_fim(m, {inst});
    std::vector<double> flat;
    flatten_params(d.diag, flat);
    REQUIRE(flat.size() == 2);
    // Only the feature coordinate seen by the positive candidate carries
    // signal: entries follow the (x_a * dy)^2 pattern.
    REQUIRE(flat[0] > 0.0);
    REQUIRE(flat[1] == 0.0);
    for (std::size_t i = 0; i < flat.size(); ++i)
        REQUIRE_THAT(flat[i], Catch::Matchers::WithinAbs(g[i] * g[i], 1e-14));
}

TEST_CASE("kfac accumulator reproduces hand-built single-usage factors") {
    // One usage with x' = [1, 0, 1] (bias appended) and dL/dy = [2].
    Model m = tiny_scorer(57, 2, 2, false);  // shapes unused; accumulator is standalone
    detail::KfacAccumulator acc(m);
    acc.activate(0, 3, 1);
    const double x_aug[3] = {1.0, 0.0, 1.0};
    const double dy[1] = {2.0};
    acc.on_usage(0, x_aug, 3, dy, 1);

    KroneckerFactorPair pair;
    pair.slot = 0;
    pair.a = acc.take_a(0);
    pair.g = acc.take_g(0);
    const double want_a[3][3] = {{1, 0, 1}, {0, 0, 0}, {1, 0, 1}};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) REQUIRE(pair.a(i, j) == want_a[i][j]);
    REQUIRE(pair.g.rows() == 1);
    REQUIRE(pair.g(0, 0) == 4.0);

    // diag(A (x) G) realizes the (x'_a * 2)^2 pattern: [4, 0, 4].
    const Tensor dense = materialize_kron(pair);
    REQUIRE(dense(0, 0) == 4.0);
    REQUIRE(dense(1, 1) == 0.0);
    REQUIRE(dense(2, 2) == 4.0);
}

TEST_CASE("kfac factors: duplicate instances don't change the mean") {
    Model m = tiny_cnn(58, 10, 4, 3, 3);
    Rng rng(13);
    const auto inst = random_instance(m, 5, rng);
    const KfcFisher one = estimate_kfac(m, {inst});
    const KfcFisher two = estimate_kfac(m, {inst, inst});
    REQUIRE(one.pairs.size() == two.pairs.size());
    for (std::size_t p = 0; p < one.pairs.size(); ++p) {
        for (std::size_t i = 0; i < one.pairs[p].a.size(); ++i)
            REQUIRE_THAT(two.pairs[p].a[i],
                         Catch::Matchers::WithinAbs(one.pairs[p].a[i], 1e-13));
        for (std::size_t i = 0; i < one.pairs[p].g.size(); ++i)
            REQUIRE_THAT(two.pairs[p].g[i],
                         Catch::Matchers::WithinAbs(one.pairs[p].g[i], 1e-13));
    }
}

TEST_CASE("conv factors collapse when all spatial patches are identical") {
    Model m = tiny_cnn(59, 8, 4, 3, 3);
    RankingInstance inst;
    inst.context.assign(4, 3u);  // constant context -> identical patches
    inst.candidates = Tensor::matrix(3, 3);
    Rng rng(14);
    for (auto& v : inst.candidates.values()) v = rng.normal();
    inst.positive = 0;

    const KfcFisher f = estimate_kfac(m, {inst});
    const std::size_t conv_slot = m.slot_of_layer[1];
    const auto* pair = f.find(conv_slot);
    REQUIRE(pair != nullptr);

    // Grab the raw conv usages from a hand-run backward: identical patches
    // must make the mean equal the single-usage outer products.
    struct Grab : UsageObserver {
        std::size_t slot;
        std::vector<std::vector<double>> xs, dys;
        void on_usage(std::size_t s, const double* x, std::size_t xl, const double* dy,
                      std::size_t yl) override {
            if (s != slot) return;
            xs.emplace_back(x, x + xl);
            dys.emplace_back(dy, dy + yl);
        }
    } grab;
    grab.slot = conv_slot;
    Workspace ws;
    GradientSet scratch = zero_like_params(m);
    instance_loss_and_backward(m, inst, ws, scratch, 1.0, &grab);
    REQUIRE(grab.xs.size() == 3);  // window 4, kernel 2 -> 3 conv positions
    for (const auto& x : grab.xs) REQUIRE(x == grab.xs[0]);
    for (const auto& dy : grab.dys)
        for (std::size_t j = 0; j < dy.size(); ++j)
            REQUIRE_THAT(dy[j], Catch::Matchers::WithinAbs(grab.dys[0][j], 1e-12));

    for (std::size_t i = 0; i < pair->a.rows(); ++i)
        for (std::size_t j = 0; j < pair->a.cols(); ++j)
            REQUIRE_THAT(pair->a(i, j),
                         Catch::Matchers::WithinAbs(grab.xs[0][i] * grab.xs[0][j], 1e-12));
    for (std::size_t i = 0; i < pair->g.rows(); ++i)
        for (std::size_t j = 0; j < pair->g.cols(); ++j)
            REQUIRE_THAT(pair->g(i, j),
                         Catch::Matchers::WithinAbs(grab.dys[0][i] * grab.dys[0][j], 1e-11));
}

TEST_CASE("kfac estimation covers embeddings diagonally and rejects layernorm") {
    Model m = tiny_transformer(60);
    Rng rng(15);
    const auto data = random_batch(m, 4, 6, rng);
    const KfcFisher f = estimate_kfac(m, data);

    const std::size_t emb_slot = m.slot_of_layer[0];
    REQUIRE(f.find_embed(emb_slot) != nullptr);
    REQUIRE(f.find(emb_slot) == nullptr);

    // Embedding diagonal equals the diagonal estimator restricted to it.
    const DiagFisher d = estimate_diag_fim(m, data);
    const Tensor& emb = *f.find_embed(emb_slot);
    for (std::size_t i = 0; i < emb.size(); ++i)
        REQUIRE_THAT(emb[i], Catch::Matchers::WithinAbs(d.diag[emb_slot][i], 1e-13));

    // LayerNorm slots are excluded; naming one is a configuration error.
    const std::size_t ln_slot = m.slot_of_layer[5];
    REQUIRE(f.find(ln_slot) == nullptr);
    REQUIRE(f.find_embed(ln_slot) == nullptr);
    REQUIRE_THROWS_AS(estimate_kfac(m, data, {ln_slot}), ConfigError);
}

TEST_CASE("materialize_kron identities") {
    KroneckerFactorPair pair;
    pair.a = Tensor::matrix(2, 2);
    pair.a(0, 0) = pair.a(1, 1) = 1.0;
    pair.g = Tensor::matrix(3, 3);
    pair.g(0, 0) = pair.g(1, 1) = pair.g(2, 2) = 1.0;
    const Tensor i6 = materialize_kron(pair);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) REQUIRE(i6(i, j) == (i == j ? 1.0 : 0.0));

    Rng rng(16);
    KroneckerFactorPair scalar;
    scalar.a = Tensor::matrix(1, 1);
    scalar.a(0, 0) = 2.0;
    scalar.g = random_psd(3, rng);
    const Tensor twog = materialize_kron(scalar);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            REQUIRE_THAT(twog(i, j), Catch::Matchers::WithinAbs(2.0 * scalar.g(i, j), 1e-14));
}

TEST_CASE("materialize_kron matches an index-formula oracle") {
    Rng rng(17);
    KroneckerFactorPair pair;
    pair.a = random_psd(3, rng);
    pair.g = random_psd(2, rng);
    const Tensor dense = materialize_kron(pair);
    REQUIRE(dense.rows() == 6);
    for (std::size_t ia = 0; ia < 3; ++ia)
        for (std::size_t ig = 0; ig < 2; ++ig)
            for (std::size_t ja = 0; ja < 3; ++ja)
                for (std::size_t jg = 0; jg < 2; ++jg)
                    REQUIRE_THAT(dense(ia * 2 + ig, ja * 2 + jg),
                                 Catch::Matchers::WithinAbs(pair.a(ia, ja) * pair.g(ig, jg),
                                                            1e-14));

    KroneckerFactorPair big;
    big.a = random_psd(60, rng);
    big.g = random_psd(60, rng);
    REQUIRE_THROWS_AS(materialize_kron(big), OracleScaleError);
}

TEST_CASE("kron quadratic form equals the dense quadratic form") {
    Rng rng(18);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t p = 1 + rng.uniform_index(8);
        const std::size_t q = 1 + rng.uniform_index(8);
        KroneckerFactorPair pair;
        pair.a = random_psd(p, rng);
        pair.g = random_psd(q, rng);
        Tensor delta = Tensor::matrix(p, q);
        for (auto& v : delta.values()) v = rng.normal();
        const double lambda = std::pow(10.0, rng.uniform(-2.0, 4.0));

        const double fast = lambda * kron_quadratic(pair, delta);

        const Tensor dense = materialize_kron(pair);
        std::vector<double> vec(delta.values().begin(), delta.values().end());
        double slow = 0.0;
        for (std::size_t i = 0; i < vec.size(); ++i)
            slow += vec[i] * dot(dense.row(i), vec.data(), vec.size());
        slow *= lambda;

        const double denom = std::max({std::fabs(fast), std::fabs(slow), 1e-300});
        REQUIRE(std::fabs(fast - slow) / denom < 1e-10);
    }
}

TEST_CASE("single-sample full fisher block equals the materialized kron block") {
    // Window 1 means the context linear layer fires exactly once per
    // instance, where the factorization is exact before averaging.
    Model m;
    m.layers = {LayerSpec::embedding(6, 3), LayerSpec::linear(3, 3, true),
                LayerSpec::linear(3 + 2, 1, true)};
    m.context_blocks = {{Block::Kind::Plain, 0}, {Block::Kind::Plain, 1}};
    m.scoring_start = 2;
    m.candidate_count = 3;
    m.candidate_dim = 2;
    assign_slots(m);
    init_params(m, 61);
    m.validate();

    Rng rng(19);
    const auto inst = random_instance(m, 1, rng);
    const FullFisher full = estimate_full_fim(m, {inst});
    const KfcFisher kfc = estimate_kfac(m, {inst});
    const std::size_t lin_slot = m.slot_of_layer[1];
    const auto* pair = kfc.find(lin_slot);
    REQUIRE(pair != nullptr);
    const Tensor block = materialize_kron(*pair);

    std::size_t off = 0;
    for (std::size_t s = 0; s < lin_slot; ++s) off += m.params[s].size();
    const std::size_t n = m.params[lin_slot].size();
    REQUIRE(block.rows() == n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            REQUIRE_THAT(full.matrix(off + i, off + j),
                         Catch::Matchers::WithinAbs(block(i, j), 1e-11));
}

TEST_CASE("estimated factors satisfy the PSD invariants") {
    Model m = tiny_cnn(62, 10, 4, 3, 3);
    Rng rng(20);
    const auto data = random_batch(m, 5, 16, rng);
    const KfcFisher f = estimate_kfac(m, data);
    for (const auto& pair : f.pairs) {
        require_psd(pair.a, "factor A");
        require_psd(pair.g, "factor G");
    }
    for (const auto& [slot, diag] : f.embed_diag) {
        (void)slot;
        for (double v : diag.values()) REQUIRE(v >= 0.0);
    }
}

TEST_CASE("penalties: zero delta gives zero, and hand arithmetic holds") {
    Model m = tiny_scorer(63, 3, 2, false);  // single 2x1 weight
    TaskSnapshot snap = snapshot_of(m, Method::EwcDiag);
    DiagFisher d;
    d.diag = zero_like_params(m);
    d.diag[0].fill(1.0);
    snap.fisher = d;
    REQUIRE(diag_penalty(m, snap, 123.0) == 0.0);

    // F all ones, lambda 1, delta (1, 2) -> 1 + 4 = 5; no factor of 1/2.
    m.params[0][0] += 1.0;
    m.params[0][1] += 2.0;
    REQUIRE_THAT(diag_penalty(m, snap, 1.0), Catch::Matchers::WithinAbs(5.0, 1e-14));

    // Gradient 2*lambda*F*delta = (2, 4).
    GradientSet g = zero_like_params(m);
    add_penalty_gradient(m, snap, 1.0, g);
    REQUIRE_THAT(g[0][0], Catch::Matchers::WithinAbs(2.0, 1e-14));
    REQUIRE_THAT(g[0][1], Catch::Matchers::WithinAbs(4.0, 1e-14));
}

TEST_CASE("diag penalty matches a dense quadratic-form oracle") {
    Model m = tiny_cnn(64, 8, 3, 3, 3);
    Rng rng(21);
    const auto data = random_batch(m, 4, 8, rng);
    TaskSnapshot snap = snapshot_of(m, Method::EwcDiag);
    snap.fisher = estimate_diag_fim(m, data);

    for (auto& p : m.params)
        for (auto& v : p.values()) v += 0.1 * rng.normal();

    const double lambda = 3.5;
    const double fast = diag_penalty(m, snap, lambda);

    double slow = 0.0;
    const auto reg = regularized_slots(m);
    const auto& d = std::get<DiagFisher>(snap.fisher);
    for (std::size_t s = 0; s < m.params.size(); ++s) {
        if (!reg[s]) continue;
        for (std::size_t i = 0; i < m.params[s].size(); ++i) {
            const double delta = m.params[s][i] - snap.mean[s][i];
            slow += d.diag[s][i] * delta * delta;
        }
    }
    slow *= lambda;
    REQUIRE_THAT(fast, Catch::Matchers::WithinRel(slow, 1e-12));
}

TEST_CASE("kfac penalty with identity factors reduces to L2") {
    Model m = tiny_cnn(65, 8, 3, 3, 3);
    Rng rng(22);
    TaskSnapshot snap = snapshot_of(m, Method::EwcKfc);
    KfcFisher f;
    const auto owners = m.slot_owner_layer();
    for (std::size_t s = 0; s < m.slot_count(); ++s) {
        const LayerSpec& spec = m.layers[owners[s]];
        if (spec.kron_factorable()) {
            KroneckerFactorPair pair;
            pair.slot = s;
            pair.a = Tensor::matrix(spec.weight_rows(), spec.weight_rows());
            for (std::size_t i = 0; i < pair.a.rows(); ++i) pair.a(i, i) = 1.0;
            pair.g = Tensor::matrix(spec.weight_cols(), spec.weight_cols());
            for (std::size_t i = 0; i < pair.g.rows(); ++i) pair.g(i, i) = 1.0;
            f.pairs.push_back(std::move(pair));
        } else if (spec.kind == LayerKind::Embedding) {
            Tensor ones(m.params[s].dims());
            ones.fill(1.0);
            f.embed_diag.emplace_back(s, std::move(ones));
        }
    }
    snap.fisher = f;

    for (auto& p : m.params)
        for (auto& v : p.values()) v += 0.15 * rng.normal();

    TaskSnapshot l2snap = snap;
    l2snap.fisher = std::monostate{};
    l2snap.method = Method::L2;
    REQUIRE_THAT(kfac_penalty(m, snap, 2.5),
                 Catch::Matchers::WithinRel(l2_penalty(m, l2snap, 2.5), 1e-12));
}

TEST_CASE("kfac penalty equals the materialized dense quadratic form per layer") {
    Model m = tiny_cnn(66, 8, 3, 3, 3);
    Rng rng(23);
    const auto data = random_batch(m, 4, 6, rng);
    TaskSnapshot snap = snapshot_of(m, Method::EwcKfc);
    snap.fisher = estimate_kfac(m, data);
    for (auto& p : m.params)
        for (auto& v : p.values()) v += 0.1 * rng.normal();

    const auto& f = std::get<KfcFisher>(snap.fisher);
    double dense_total = 0.0;
    for (const auto& pair : f.pairs) {
        Tensor delta = m.params[pair.slot];
        delta.add_scaled(snap.mean[pair.slot], -1.0);
        const Tensor dense = materialize_kron(pair);
        std::vector<double> vec(delta.values().begin(), delta.values().end());
        for (std::size_t i = 0; i < vec.size(); ++i)
            dense_total += vec[i] * dot(dense.row(i), vec.data(), vec.size());
    }
    for (const auto& [slot, diag] : f.embed_diag) {
        Tensor delta = m.params[slot];
        delta.add_scaled(snap.mean[slot], -1.0);
        for (std::size_t i = 0; i < delta.size(); ++i)
            dense_total += diag[i] * delta[i] * delta[i];
    }
    REQUIRE_THAT(kfac_penalty(m, snap, 1.0),
                 Catch::Matchers::WithinRel(dense_total, 1e-10));
}

TEST_CASE("penalty gradients match finite differences") {
    Model m = tiny_cnn(67, 8, 3, 3, 3);
    Rng rng(24);
    const auto data = random_batch(m, 4, 6, rng);

    auto check = [&](TaskSnapshot snap, auto penalty_fn) {
        for (auto& p : m.params)
            for (auto& v : p.values()) v += 0.1 * rng.normal();
        const double lambda = 2.0;
        GradientSet g = zero_like_params(m);
        add_penalty_gradient(m, snap, lambda, g);
        const double h = 1e-6;
        double worst = 0.0;
        for (std::size_t s = 0; s < m.params.size(); ++s)
            for (std::size_t i = 0; i < m.params[s].size(); ++i) {
                const double saved = m.params[s][i];
                m.params[s][i] = saved + h;
                const double up = penalty_fn(m, snap, lambda);
                m.params[s][i] = saved - h;
                const double down = penalty_fn(m, snap, lambda);
                m.params[s][i] = saved;
                const double fd = (up - down) / (2.0 * h);
                const double denom = std::max({std::fabs(fd), std::fabs(g[s][i]), 1e-6});
                worst = std::max(worst, std::fabs(fd - g[s][i]) / denom);
            }
        return worst;
    };

    SECTION("diagonal") {
        TaskSnapshot snap = snapshot_of(m, Method::EwcDiag);
        snap.fisher = estimate_diag_fim(m, data);
        REQUIRE(check(snap, [](const Model& mm, const TaskSnapshot& ss, double ll) {
                    return diag_penalty(mm, ss, ll);
                }) < 1e-5);
    }
    SECTION("kronecker") {
        TaskSnapshot snap = snapshot_of(m, Method::EwcKfc);
        snap.fisher = estimate_kfac(m, data);
        REQUIRE(check(snap, [](const Model& mm, const TaskSnapshot& ss, double ll) {
                    return kfac_penalty(mm, ss, ll);
                }) < 1e-5);
    }
    SECTION("l2") {
        TaskSnapshot snap = snapshot_of(m, Method::L2);
        REQUIRE(check(snap, [](const Model& mm, const TaskSnapshot& ss, double ll) {
                    return l2_penalty(mm, ss, ll);
                }) < 1e-5);
    }
}

TEST_CASE("full penalty matches an Eigen dense oracle") {
    Model m = tiny_scorer(68, 3, 3, true);
    Rng rng(25);
    const auto data = random_batch(m, 1, 5, rng);
    TaskSnapshot snap = snapshot_of(m, Method::EwcDiag);
    snap.fisher = estimate_full_fim(m, data);
    for (auto& p : m.params)
        for (auto& v : p.values()) v += 0.1 * rng.normal();

    const auto& f = std::get<FullFisher>(snap.fisher);
    std::vector<double> delta_flat;
    GradientSet delta = zero_like_params(m);
    for (std::size_t s = 0; s < m.params.size(); ++s) {
        delta[s] = m.params[s];
        delta[s].add_scaled(snap.mean[s], -1.0);
    }
    flatten_params(delta, delta_flat);
    Eigen::VectorXd v(delta_flat.size());
    for (std::size_t i = 0; i < delta_flat.size(); ++i) v(i) = delta_flat[i];
    const double want = 2.0 * v.dot(to_eigen(f.matrix) * v);
    REQUIRE_THAT(full_penalty(m, snap, 2.0), Catch::Matchers::WithinRel(want, 1e-11));
}

TEST_CASE("snapshot incompatibility is reported") {
    Model m = tiny_cnn(69, 8, 3, 3, 3);
    Model other = tiny_cnn(69, 8, 4, 3, 3);  // different hidden width
    TaskSnapshot snap = snapshot_of(other, Method::EwcDiag);
    DiagFisher d;
    d.diag = zero_like_params(other);
    snap.fisher = d;
    REQUIRE_THROWS_AS(diag_penalty(m, snap, 1.0), SnapshotMismatchError);

    TaskSnapshot missing = snapshot_of(m, Method::EwcKfc);
    missing.fisher = KfcFisher{};  // no factors at all
    REQUIRE_THROWS_AS(kfac_penalty(m, missing, 1.0), SnapshotMismatchError);
}

TEST_CASE("memory accounting matches the closed forms") {
    const LayerSpec one = LayerSpec::linear(10, 10, true);
    REQUIRE(memory_footprint(std::vector<LayerSpec>{one}, FisherScheme::BlockDiag) == 12100ULL);
    REQUIRE(memory_footprint(std::vector<LayerSpec>{one}, FisherScheme::Kfc) == 221ULL);
    REQUIRE(memory_footprint(std::vector<LayerSpec>{one}, FisherScheme::Diag) == 110ULL);
    REQUIRE(memory_footprint(std::vector<LayerSpec>{one}, FisherScheme::Full) == 12100ULL);

    const std::vector<LayerSpec> two{one, one};
    REQUIRE(memory_footprint(two, FisherScheme::BlockDiag) == 2 * 12100ULL);
    REQUIRE(memory_footprint(two, FisherScheme::Kfc) == 2 * 221ULL);
    REQUIRE(memory_footprint(two, FisherScheme::Diag) == 220ULL);
    REQUIRE(memory_footprint(two, FisherScheme::Full) == 220ULL * 220ULL);  // (2P)^2

    // The shipped CNN ranker at hidden 768 is far beyond dense feasibility.
    RankerConfig cfg;
    cfg.hidden = 768;
    Model big = make_cnn_ranker(cfg, 1);
    REQUIRE(memory_footprint(big, FisherScheme::Full) > 1000000000000ULL);

    // LayerNorm never counts.
    Model tr = tiny_transformer(70);
    const auto owners = tr.slot_owner_layer();
    unsigned long long diag_count = memory_footprint(tr, FisherScheme::Diag);
    unsigned long long reg_params = 0;
    for (std::size_t s = 0; s < tr.slot_count(); ++s)
        if (tr.layers[owners[s]].regularized()) reg_params += tr.params[s].size();
    REQUIRE(diag_count == reg_params);
}
