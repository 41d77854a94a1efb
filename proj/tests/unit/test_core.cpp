#include <doctest.h>

#include <fstream>

#include "elvc/core/error.hpp"
#include "elvc/core/matrix_io.hpp"
#include "elvc/core/wav.hpp"
#include "elvc/nn/checkpoint.hpp"
#include "elvc/nn/layers.hpp"
#include "elvc/nn/optim.hpp"
#include "elvc/nn/transformer.hpp"
#include "support.hpp"

using namespace elvc;
using ad::Var;

namespace {

/// Projects an arbitrary-shape output onto a fixed random matrix so every entry gets a distinct gradient.
Var probe(const Var& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::sum(ad::hadamard(y, Var(randn(y.rows(), y.cols(), rng))));
}

struct OpFixture {
  nn::ParameterStore store;
  ad::Parameter* a;
  ad::Parameter* b;
  ad::Parameter* row;
  ad::Parameter* sq;

  OpFixture() {
    Rng rng(5);
    a = &store.add("a", randn(4, 3, rng));
    b = &store.add("b", randn(4, 3, rng));
    row = &store.add("row", randn(1, 3, rng));
    sq = &store.add("sq", randn(3, 5, rng));
  }
  Var A() { return Var::param(*a); }
  Var B() { return Var::param(*b); }
  Var R() { return Var::param(*row); }
  Var S() { return Var::param(*sq); }
};

}  // namespace

TEST_CASE("autodiff primitives match central differences") {
  using Fn = std::function<Var(OpFixture&)>;
  const std::vector<std::pair<std::string, Fn>> ops = {
      {"add", [](OpFixture& f) { return f.A() + f.B(); }},
      {"sub", [](OpFixture& f) { return f.A() - f.B(); }},
      {"scale", [](OpFixture& f) { return 2.5 * f.A(); }},
      {"neg", [](OpFixture& f) { return -f.A(); }},
      {"hadamard", [](OpFixture& f) { return ad::hadamard(f.A(), f.B()); }},
      {"matmul", [](OpFixture& f) { return ad::matmul(f.A(), f.S()); }},
      {"matmul_nt", [](OpFixture& f) { return ad::matmul_nt(f.A(), f.B()); }},
      {"transpose", [](OpFixture& f) { return ad::transpose(f.A()); }},
      {"add_scalar", [](OpFixture& f) { return ad::add_scalar(f.A(), 0.3); }},
      {"add_row", [](OpFixture& f) { return ad::add_row(f.A(), f.R()); }},
      {"mul_row", [](OpFixture& f) { return ad::mul_row(f.A(), f.R()); }},
      {"relu", [](OpFixture& f) { return ad::relu(f.A()); }},
      {"silu", [](OpFixture& f) { return ad::silu(f.A()); }},
      {"sigmoid", [](OpFixture& f) { return ad::sigmoid(f.A()); }},
      {"tanh", [](OpFixture& f) { return ad::tanh(f.A()); }},
      {"softmax_rows", [](OpFixture& f) { return ad::softmax_rows(f.A()); }},
      {"log_softmax_rows", [](OpFixture& f) { return ad::log_softmax_rows(f.A()); }},
      {"layer_norm", [](OpFixture& f) { return ad::layer_norm(f.A()); }},
      {"concat_cols", [](OpFixture& f) { const Var p[] = {f.A(), f.B()}; return ad::concat_cols(p); }},
      {"concat_rows", [](OpFixture& f) { const Var p[] = {f.A(), f.R()}; return ad::concat_rows(p); }},
      {"slice_rows", [](OpFixture& f) { return ad::slice_rows(f.A(), 1, 2); }},
      {"slice_cols", [](OpFixture& f) { return ad::slice_cols(f.S(), 2, 3); }},
      {"gather_rows", [](OpFixture& f) { const int idx[] = {2, 0, 2, 1}; return ad::gather_rows(f.A(), idx); }},
      {"mean", [](OpFixture& f) { return ad::mean(f.A()); }},
      {"mean_rows", [](OpFixture& f) { return ad::mean_rows(f.A()); }},
      {"stack_frames", [](OpFixture& f) { return ad::stack_frames(f.A(), 3); }},
      {"depthwise_conv", [](OpFixture& f) { return ad::depthwise_conv(f.A(), ad::slice_rows(f.B(), 0, 3)); }},
      {"time_unfold", [](OpFixture& f) { return ad::time_unfold(f.A(), 3, 2); }},
      {"l1_loss", [](OpFixture& f) { return ad::l1_loss(f.A(), Matrix::Constant(4, 3, 0.1)); }},
      {"mse_loss", [](OpFixture& f) { return ad::mse_loss(f.A(), Matrix::Constant(4, 3, 0.1)); }},
      {"bce_with_logits",
       [](OpFixture& f) { return ad::bce_with_logits(f.A(), (f.b->value.array() > 0).cast<double>().matrix()); }},
      {"cross_entropy", [](OpFixture& f) { const int t[] = {0, 2, 1, 1}; return ad::cross_entropy(f.A(), t); }},
  };
  for (const auto& [name, fn] : ops) {
    CAPTURE(name);
    OpFixture f;
    const auto r = test::grad_check(f.store, [&] { return probe(fn(f)); });
    CHECK(r.analytic_norm > 0.0);
    CHECK(r.rel_error < 1e-6);
  }
}

TEST_CASE("layers match central differences") {
  nn::ParameterStore store;
  Rng rng(3);
  nn::Linear lin(store, "lin", 4, 4, rng);
  nn::LayerNorm ln(store, "ln", 4);
  nn::ConditionalLayerNorm cln(store, "cln", 4, 2, rng);
  nn::MultiHeadAttention mha(store, "mha", 4, 2, rng);
  nn::FeedForward ff(store, "ff", 4, 6, rng);
  nn::ConformerBlock conf(store, "conf", 4, 2, 6, 3, rng);
  nn::DecoderBlock dec(store, "dec", 4, 2, 6, rng);
  nn::Embedding emb(store, "emb", 5, 4, rng);
  REQUIRE(store.num_scalars() <= 1000);
  const Matrix x = randn(5, 4, rng);
  const Matrix mem = randn(3, 4, rng);
  const Matrix cond = randn(1, 2, rng);
  const Matrix causal = nn::causal_mask(5);
  const int ids[] = {1, 4, 0, 2, 3};
  const auto r = test::grad_check(store, [&] {
    Var h = lin(Var(x)) + emb(ids);
    h = ln(h);
    h = cln(h, Var(cond));
    h = mha(h, h, &causal);
    h = ff(h) + conf(h);
    return probe(dec(h, Var(mem), causal));
  });
  CHECK(r.rel_error < 1e-5);
}

TEST_CASE("causal mask blocks the future") {
  const Matrix m = nn::causal_mask(4);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (j <= i) CHECK(m(i, j) == 0.0);
      else CHECK(m(i, j) < -1e8);
    }
  }
}

TEST_CASE("no-grad guard records nothing") {
  nn::ParameterStore store;
  auto& p = store.add("p", Matrix::Ones(2, 2));
  {
    ad::NoGradGuard guard;
    CHECK_FALSE(ad::grad_enabled());
    const Var y = ad::sum(Var::param(p));
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(ad::grad_enabled());
  CHECK(ad::sum(Var::param(p)).requires_grad());
}

TEST_CASE("parameter store flatten round trip and scopes") {
  nn::ParameterStore store;
  Rng rng(1);
  store.add("enc.w", randn(2, 3, rng));
  store.add("enc.b", randn(1, 3, rng));
  store.add("encoder.w", randn(2, 2, rng));
  store.add("dec.w", randn(3, 1, rng));
  CHECK(store.num_scalars() == 6 + 3 + 4 + 3);
  const Vector flat = store.flatten();
  store.unflatten(Vector::Zero(flat.size()));
  CHECK(store.flatten().isZero());
  store.unflatten(flat);
  CHECK(store.flatten() == flat);
  CHECK(store.in_scope("enc").size() == 2);
  CHECK(store.in_scope("encoder").size() == 1);
  CHECK_THROWS_AS(store.add("enc.w", Matrix::Zero(1, 1)), Error);
}

TEST_CASE("adam leaves frozen scopes bit-identical") {
  nn::ParameterStore store;
  Rng rng(2);
  auto& frozen = store.add("decoder.w", randn(3, 3, rng));
  auto& live = store.add("encoder.w", randn(3, 3, rng));
  const Matrix frozen_before = frozen.value;
  const Matrix live_before = live.value;
  nn::Adam adam(store, {}, {"decoder"});
  for (int i = 0; i < 5; ++i) {
    ad::backward(ad::sum(ad::hadamard(ad::matmul(Var::param(live), Var::param(frozen)), Var(randn(3, 3, rng)))));
    adam.step();
  }
  CHECK(frozen.value == frozen_before);
  CHECK(live.value != live_before);
  CHECK(frozen.grad.isZero());
}

TEST_CASE("adam minimizes a quadratic") {
  nn::ParameterStore store;
  auto& p = store.add("x", Matrix::Constant(1, 3, 5.0));
  nn::AdamOptions opts;
  opts.lr = 0.1;
  nn::Adam adam(store, opts);
  for (int i = 0; i < 500; ++i) {
    ad::backward(ad::mse_loss(Var::param(p), Matrix::Constant(1, 3, -1.0)));
    adam.step();
  }
  CHECK((p.value.array() + 1.0).abs().maxCoeff() < 1e-2);
}

TEST_CASE("matrix dump round trip and header layout") {
  const auto dir = test::scratch_dir("matrix_io");
  Rng rng(4);
  const Matrix m = randn(7, 3, rng);
  write_matrix(dir / "a.emat", m, DType::Float64);
  CHECK(read_matrix(dir / "a.emat") == m);
  write_matrix(dir / "b.emat", m, DType::Float32);
  CHECK((read_matrix(dir / "b.emat") - m).cwiseAbs().maxCoeff() < 1e-6);

  std::ifstream in(dir / "a.emat", std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "EMAT");
  in.seekg(12);
  std::uint64_t rows = 0;
  in.read(reinterpret_cast<char*>(&rows), 8);
  CHECK(rows == 7);
  CHECK(std::filesystem::file_size(dir / "a.emat") == 28 + 7 * 3 * 8);

  std::ofstream(dir / "bad.emat") << "garbage";
  CHECK_THROWS_AS(read_matrix(dir / "bad.emat"), Error);
  CHECK_THROWS_AS(read_matrix(dir / "missing.emat"), Error);
}

TEST_CASE("wav round trip is within one quantization step") {
  const auto dir = test::scratch_dir("wav");
  const Vector w = test::sine(300.0, 0.1, 0.7);
  write_wav(dir / "x.wav", w);
  const auto back = read_wav(dir / "x.wav");
  CHECK(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == w.size());
  CHECK((back.samples - w).cwiseAbs().maxCoeff() <= 1.0 / 32767.0 + 1e-12);
}

TEST_CASE("checkpoint round trip keeps metadata and tensors") {
  const auto dir = test::scratch_dir("ckpt");
  nn::ParameterStore store;
  Rng rng(8);
  store.add("a.w", randn(3, 4, rng));
  store.add("b", randn(1, 2, rng));
  nn::save_checkpoint(dir / "m.ckpt", store, {{"kind", "test"}, {"epochs", 3}});
  const auto ck = nn::load_checkpoint(dir / "m.ckpt");
  CHECK(ck.meta.at("kind") == "test");
  CHECK(ck.meta.at("epochs") == 3);
  CHECK(ck.tensors.at("a.w") == store.get("a.w").value);
  CHECK(ck.tensors.at("b") == store.get("b").value);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(nn::load_checkpoint(dir / "junk.ckpt"), Error);
}

TEST_CASE("derived seeds are distinct and stable") {
  CHECK(derive_seed(1, 0) == derive_seed(1, 0));
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0) != derive_seed(2, 0));
}
