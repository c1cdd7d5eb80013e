#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "helpers.hpp"
#include "rdat/advtrain.hpp"
#include "rdat/errors.hpp"
#include "rdat/rng.hpp"

using namespace rdat;
using namespace rdat::advtrain;
using forecaster::Forecaster;

namespace {

struct Fixture {
  datakit::PreparedData data = datakit::prepare(datakit::synth_traffic(6, 300, 3), 4, 4);
  Forecaster model = forecaster::make_forecaster(testutil::tiny_arch(), 6, 5);

  ATConfig config(double alpha) const {
    ATConfig c;
    c.alpha = alpha;
    c.train_node_ratio = 0.34;
    c.epochs = 3;
    c.batch_size = 8;
    c.max_batches = 3;
    c.steps = 3;
    c.selection = Selection::Random;
    c.val_windows = 8;
    return c;
  }
};

// The training loop re-assembled from its parts: random per-sample nodes,
// PGD against MSE (+ alpha * teacher MSE), then one Adam step on the same mix.
Forecaster reference_training(const Fixture& f, const ATConfig& c, std::uint64_t seed) {
  Forecaster model = f.model;
  Adam opt(c.adam);
  const std::size_t n = model.nodes, eta = perturb::nodes_for_ratio(c.train_node_ratio, n);
  const perturb::PerturbBudget budget{c.epsilon, eta, c.steps, c.gamma};
  std::optional<Forecaster> teacher;
  for (std::size_t e = 0; e < c.epochs; ++e) {
    const auto order = forecaster::epoch_order(f.data.split.train.size(), seed, e);
    for (std::size_t bi = 0; bi < c.max_batches; ++bi) {
      const std::vector<std::size_t> idx(order.begin() + bi * c.batch_size, order.begin() + (bi + 1) * c.batch_size);
      const auto batch = forecaster::make_batch(f.data.split.train, idx);
      std::vector<perturb::NodeIndicator> inds;
      for (std::size_t b = 0; b < batch.size; ++b) {
        Rng rng(derive_seed(seed, {stream::kSelection, e, bi, b}));
        inds.push_back(perturb::make_indicator(sample_without_replacement(rng, n, eta), n));
      }
      Tensor tp;
      if (teacher) tp = forecaster::predict(*teacher, batch.x, batch.size);
      const auto adv = perturb::pgd_attack_batch(model, batch.x, batch.size, inds, budget,
                                                 {batch.y, teacher ? tp : Tensor{}, teacher ? c.alpha : 0.0}, c.init,
                                                 derive_seed(seed, {stream::kPgdInit, e, bi}));
      ParamSet grads;
      forecaster::loss_and_grads(model, adv.x_adv, batch.size, [&](ag::Var pred) {
        ag::Tape& t = *pred.tape;
        ag::Var l = ag::mse(pred, t.constant(batch.y));
        if (teacher) l = ag::add(l, ag::scale(ag::mse(pred, t.constant(tp)), c.alpha));
        return l;
      }, grads);
      opt.step(model.params, grads);
    }
    if (c.alpha > 0) teacher = model;
  }
  return model;
}

}  // namespace

TEST_SUITE("advtrain") {
  TEST_CASE("distillation loss") {
    const Tensor s = Tensor::matrix(2, 2, {1, 2, 3, 4});
    CHECK(kd_loss(s, s) == 0.0);
    CHECK(kd_loss(s, Tensor::matrix(2, 2, {3, 4, 5, 6})) == doctest::Approx(4.0));
    CHECK(kd_loss(s, Tensor::matrix(2, 2, {1, 2, 3, 0})) == doctest::Approx(4.0));
    CHECK_THROWS_AS(kd_loss(s, Tensor({4, 1})), ContractError);
  }

  TEST_CASE("combined objective") {
    CHECK(at_loss(0.8, 1.0, 0.0, false) == doctest::Approx(0.8));
    CHECK(at_loss(0.8, 1.0, 0.4, true) == doctest::Approx(0.8));
    CHECK(at_loss(0.8, 1.0, 0.4, false) == doctest::Approx(1.2));

    ag::Tape tape;
    ag::Var pred = tape.leaf(Tensor::matrix(1, 2, {1, 3}));
    const Tensor y = Tensor::matrix(1, 2, {0, 1});
    const Tensor teacher = Tensor::matrix(1, 2, {2, 3});
    ag::Var kd = kd_loss(pred, teacher);
    CHECK(kd.scalar() == doctest::Approx(0.5));
    ag::Var l = at_loss(pred, y, kd, 0.4, false);
    CHECK(l.scalar() == doctest::Approx(2.5 + 0.2));
    tape.backward(l);
    const Tensor g = tape.grad_or_zero(pred.id);
    // d/dp [mean (p - y)^2 + 0.4 mean (p - t)^2] = (p - y) + 0.4 (p - t) for two entries.
    CHECK(g[0] == doctest::Approx(1.0 + 0.4 * -1.0));
    CHECK(g[1] == doctest::Approx(2.0 + 0.0));
  }

  TEST_CASE("snapshots are deep copies") {
    Fixture f;
    Forecaster m = f.model;
    const TeacherSnapshot snap = snapshot_teacher(m, 3);
    CHECK(snap.source_epoch == 3);
    CHECK(snap.checksum == checksum(m.params));
    m.params.at("head.b2")[0] += 1.0;
    CHECK(snap.params == f.model.params);
    CHECK(snap.checksum != checksum(m.params));
  }

  TEST_CASE("training loop matches a re-assembled reference") {
    Fixture f;
    for (double alpha : {0.0, 0.4}) {
      ATConfig c = f.config(alpha);
      c.validate = false;
      const ATResult r = adversarial_train(f.model, nullptr, f.data.split, c, f.data.graph, f.data.scaler, 9);
      const Forecaster want = reference_training(f, c, 9);
      double worst = 0;
      for (const auto& [name, t] : want.params.tensors()) worst = std::max(worst, max_abs_diff(t, r.model.params.at(name)));
      CHECK(worst <= 1e-12);
    }
  }

  TEST_CASE("teacher at epoch k is the model at the end of epoch k-1") {
    Fixture f;
    ATConfig c = f.config(0.4);
    c.validate = false;
    const ATResult full = adversarial_train(f.model, nullptr, f.data.split, c, f.data.graph, f.data.scaler, 2);
    REQUIRE(full.log.epochs.size() == 3);
    CHECK(full.log.epochs[0].teacher_epoch == 0);
    CHECK(full.log.epochs[0].kd_loss == 0.0);
    for (std::size_t k = 1; k < 3; ++k) {
      ATConfig shorter = c;
      shorter.epochs = k;
      const ATResult part = adversarial_train(f.model, nullptr, f.data.split, shorter, f.data.graph, f.data.scaler, 2);
      CHECK(full.log.epochs[k].teacher_epoch == k);
      CHECK(full.log.epochs[k].teacher_checksum == checksum(part.model.params));
      CHECK(full.log.epochs[k].kd_loss > 0.0);
    }
  }

  TEST_CASE("alpha zero reduces to plain adversarial training") {
    Fixture f;
    for (auto scope : {SelectionScope::Batch, SelectionScope::Epoch}) {
      ATConfig c = f.config(0.0);
      c.scope = scope;
      const ATResult a = adversarial_train(f.model, nullptr, f.data.split, c, f.data.graph, f.data.scaler, 4);
      const ATResult b = plain_adversarial_train(f.model, f.data.split, c, f.data.graph, f.data.scaler, 4);
      for (const auto& [name, t] : a.model.params.tensors()) CHECK(max_abs_diff(t, b.model.params.at(name)) <= 1e-9);
      for (std::size_t e = 0; e < 3; ++e) {
        CHECK(a.log.epochs[e].kd_loss == 0.0);
        CHECK(a.log.epochs[e].teacher_epoch == 0);
        CHECK(a.log.epochs[e].adv_loss == doctest::Approx(b.log.epochs[e].adv_loss).epsilon(1e-9));
        CHECK(a.log.epochs[e].adv_val_mae == doctest::Approx(b.log.epochs[e].adv_val_mae).epsilon(1e-9));
        CHECK(a.log.epochs[e].selected == b.log.epochs[e].selected);
      }
    }
  }

  TEST_CASE("policy selection uses greedy decoding") {
    Fixture f;
    policy::PolicyConfig pc;
    pc.hidden_channels = 4;
    pc.head_channels = 6;
    pc.node_embed_dim = 3;
    pc.embed_dim = 8;
    pc.heads = 2;
    const policy::PolicyNet net = policy::make_policy(pc, 6, 4, 1, 1);
    ATConfig c = f.config(0.4);
    c.selection = Selection::Policy;
    const auto batch = forecaster::make_batch(f.data.split.train, 0, 4);
    const auto got = select_training_nodes(c, &net, batch, 6, 3, 1, 0, 0, nullptr);
    const auto want = policy::sample_batch(net, batch.x, 4, 3, policy::DecodeMode::Greedy, 0);
    for (std::size_t b = 0; b < 4; ++b) CHECK(got[b] == want[b].omega);

    const std::vector<std::size_t> fixed{2, 5};
    c.scope = SelectionScope::Epoch;
    for (const auto& o : select_training_nodes(c, &net, batch, 6, 2, 1, 0, 0, &fixed)) CHECK(o == fixed);
    CHECK_THROWS_AS(select_training_nodes(c, &net, batch, 6, 2, 1, 0, 0, nullptr), ContractError);

    c.scope = SelectionScope::Batch;
    c.epochs = 1;
    c.max_batches = 1;
    const ATResult r = adversarial_train(f.model, &net, f.data.split, c, f.data.graph, f.data.scaler, 1);
    CHECK(r.log.epochs.size() == 1);
  }

  TEST_CASE("missing policy is a configuration error") {
    Fixture f;
    ATConfig c = f.config(0.4);
    c.selection = Selection::Policy;
    CHECK_THROWS_AS(adversarial_train(f.model, nullptr, f.data.split, c, f.data.graph, f.data.scaler, 1), ConfigError);
  }

  TEST_CASE("divergence reports the failing epoch") {
    Fixture f;
    Forecaster broken = f.model;
    broken.params.at("head.w2")[0] = std::numeric_limits<double>::quiet_NaN();
    ATConfig c = f.config(0.4);
    try {
      adversarial_train(broken, nullptr, f.data.split, c, f.data.graph, f.data.scaler, 1);
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(e.epoch == 1);
    }
    CHECK_THROWS_AS(plain_adversarial_train(broken, f.data.split, c, f.data.graph, f.data.scaler, 1), TrainingError);
  }

  TEST_CASE("config validation") {
    ATConfig c;
    c.alpha = -1;
    CHECK_THROWS_AS(validate_config(c), ParameterError);
    c = ATConfig{};
    c.train_node_ratio = 0;
    CHECK_THROWS_AS(validate_config(c), ParameterError);
    c = ATConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(validate_config(c), ParameterError);
  }

  TEST_CASE("training log file") {
    Fixture f;
    ATConfig c = f.config(0.4);
    c.epochs = 2;
    const ATResult r = adversarial_train(f.model, nullptr, f.data.split, c, f.data.graph, f.data.scaler, 1);
    for (const auto& e : r.log.epochs) {
      CHECK(e.clean_val_mae > 0.0);
      CHECK(e.adv_val_mae > 0.0);
    }
    const auto path = std::filesystem::temp_directory_path() / "rdat_test_train_log.csv";
    write_train_log(path, r.log);
    std::ifstream in(path);
    std::string line;
    std::size_t lines = 0;
    std::getline(in, line);
    CHECK(line.rfind("epoch,adv_loss,kd_loss", 0) == 0);
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 2);
  }
}
