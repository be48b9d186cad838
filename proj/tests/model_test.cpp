#include <gtest/gtest.h>

#include <cmath>

#include "msdet/gradcheck.hpp"
#include "msdet/model.hpp"

namespace msdet {
namespace {

Tensor random_image(size_t s, size_t ch, uint64_t seed) {
  Tensor img({s, s, ch});
  Rng r(seed);
  for (double& v : img.data) v = r.uniform();
  return img;
}

void zero_param(ParamStore& ps, const std::string& name) {
  Parameter& p = ps.at(name);
  std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
}

TEST(Config, StridesAndGrids) {
  ModelConfig cfg;
  EXPECT_EQ(cfg.stride(1), 8u);
  EXPECT_EQ(cfg.stride(2), 16u);
  EXPECT_EQ(cfg.stride(3), 32u);
  EXPECT_EQ(cfg.grid(1), 8u);
  EXPECT_EQ(cfg.grid(2), 4u);
  EXPECT_EQ(cfg.grid(3), 2u);
  EXPECT_DOUBLE_EQ(cfg.base_anchor_size(1), 0.05);
  EXPECT_DOUBLE_EQ(cfg.base_anchor_size(2), 0.10);
  EXPECT_DOUBLE_EQ(cfg.base_anchor_size(3), 0.20);
}

TEST(Backbone, PyramidShapes) {
  ModelConfig cfg;
  Model model(cfg, 3);
  Tape t;
  Pyramid pyr = model.toy_backbone_forward(t, random_image(64, 3, 1),
                                           Modality::visible);
  ASSERT_EQ(pyr.levels.size(), 3u);
  EXPECT_EQ(pyr.levels[0].shape(), (Shape{8, 8, 32}));
  EXPECT_EQ(pyr.levels[1].shape(), (Shape{4, 4, 32}));
  EXPECT_EQ(pyr.levels[2].shape(), (Shape{2, 2, 32}));
}

TEST(Backbone, ZeroImageZeroBiasGivesZeroFeatures) {
  ModelConfig cfg;
  Model model(cfg, 3);  // biases start at zero
  Tape t;
  Pyramid pyr = model.toy_backbone_forward(t, Tensor({64, 64, 1}),
                                           Modality::infrared);
  for (const Value& lvl : pyr.levels)
    for (double v : lvl.val().data) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, ModalitiesUseDistinctParameters) {
  ModelConfig cfg;
  Model model(cfg, 3);
  // Same pixel content through both branches; single-channel for both, so
  // feed the infrared branch and a visible branch restricted via kludge is
  // not possible -- instead compare parameter tensors directly.
  const Tensor& wv = model.params().at("backbone.visible.l1.w").value;
  const Tensor& wi = model.params().at("backbone.infrared.l1.w").value;
  EXPECT_NE(wv.shape, wi.shape);  // 3-channel vs 1-channel patches
  EXPECT_NE(wv.data, model.params().at("backbone.visible.l2.w").value.data);
}

TEST(Backbone, NonDivisibleExtentsRejected) {
  ModelConfig cfg;
  Model model(cfg, 3);
  Tape t;
  EXPECT_THROW(model.toy_backbone_forward(t, Tensor({60, 60, 3}),
                                          Modality::visible),
               Error);
  EXPECT_THROW(model.toy_backbone_forward(t, Tensor({64, 64, 1}),
                                          Modality::visible),
               Error);
}

TEST(Flatten, TokenCountAndOrder) {
  ModelConfig cfg;
  Model model(cfg, 5);
  Tape t;
  Pyramid vis = model.toy_backbone_forward(t, random_image(64, 3, 1),
                                           Modality::visible);
  Pyramid ir = model.toy_backbone_forward(t, random_image(64, 1, 2),
                                          Modality::infrared);
  TokenSequence seq = model.flatten_and_tag(
      {{Modality::visible, vis}, {Modality::infrared, ir}});
  const size_t per_modality = 64 + 16 + 4;
  ASSERT_EQ(seq.info.size(), 2 * per_modality);
  EXPECT_EQ(seq.feats.shape(), (Shape{2 * per_modality, 32}));
  for (size_t i = 0; i < seq.info.size(); ++i)
    EXPECT_EQ(seq.info[i].modality,
              i < per_modality ? Modality::visible : Modality::infrared);
}

TEST(Flatten, ProvenanceRoundTripAndPositions) {
  ModelConfig cfg;
  Model model(cfg, 5);
  Tape t;
  Pyramid vis = model.toy_backbone_forward(t, random_image(64, 3, 1),
                                           Modality::visible);
  TokenSequence seq = model.flatten_and_tag({{Modality::visible, vis}});
  // Recomputing the flat index from (level, row, col) is the identity.
  size_t idx = 0;
  for (size_t l = 1; l <= 3; ++l) {
    const size_t g = cfg.grid(l);
    for (size_t r = 0; r < g; ++r)
      for (size_t c = 0; c < g; ++c, ++idx) {
        EXPECT_EQ(seq.info[idx].level, l);
        EXPECT_EQ(seq.info[idx].row, r);
        EXPECT_EQ(seq.info[idx].col, c);
      }
  }
  // Grid-center position of cell (0,0) on the 8x8 level.
  EXPECT_DOUBLE_EQ(seq.info[0].px, 0.0625);
  EXPECT_DOUBLE_EQ(seq.info[0].py, 0.0625);
}

// A hand-built 4-token sequence whose score equals the first feature channel.
TokenSequence tiny_sequence(Tape& t, Model& model,
                            const std::vector<double>& scores) {
  zero_param(model.params(), "select.score.w");
  zero_param(model.params(), "select.score.b");
  model.params().at("select.score.w").value.data[0] = 1.0;
  const size_t C = model.config().channels;
  Tensor feats({scores.size(), C});
  for (size_t i = 0; i < scores.size(); ++i) feats.data[i * C] = scores[i];
  TokenSequence seq;
  seq.feats = t.constant(std::move(feats));
  for (size_t i = 0; i < scores.size(); ++i)
    seq.info.push_back(TokenInfo{i < 2 ? Modality::visible : Modality::infrared,
                                 1, 0, i, 0.1 + 0.2 * static_cast<double>(i),
                                 0.3});
  return seq;
}

TEST(Selection, TopKWithTies) {
  ModelConfig cfg;
  Model model(cfg, 7);
  Tape t;
  TokenSequence seq = tiny_sequence(t, model, {0.9, 0.1, 0.8, 0.2});
  ForwardResult fr;
  model.competitive_query_selection(t, seq, 2, fr);
  ASSERT_EQ(fr.sel_tokens, (std::vector<size_t>{0, 2}));

  Tape t2;
  TokenSequence tied = tiny_sequence(t2, model, {0.5, 0.5, 0.5, 0.9});
  ForwardResult fr2;
  model.competitive_query_selection(t2, tied, 3, fr2);
  EXPECT_EQ(fr2.sel_tokens, (std::vector<size_t>{3, 0, 1}));  // ties: low index
}

TEST(Selection, MonotoneScoreTransformKeepsSelection) {
  ModelConfig cfg;
  Model model(cfg, 7);
  Tape t;
  TokenSequence seq = tiny_sequence(t, model, {0.3, -0.2, 0.7, 0.1});
  ForwardResult fr;
  model.competitive_query_selection(t, seq, 2, fr);
  // Strictly increasing transform of every score: s -> 3s + 10.
  model.params().at("select.score.w").value.data[0] = 3.0;
  model.params().at("select.score.b").value.data[0] = 10.0;
  Tape t2;
  TokenSequence seq2 = seq;
  seq2.feats = t2.constant(seq.feats.val());
  ForwardResult fr2;
  model.competitive_query_selection(t2, seq2, 2, fr2);
  EXPECT_EQ(fr.sel_tokens, fr2.sel_tokens);
}

TEST(Selection, ZeroProposalHeadYieldsBaseAnchorsExactly) {
  ModelConfig cfg;
  Model model(cfg, 7);
  zero_param(model.params(), "select.proposal.w");
  zero_param(model.params(), "select.proposal.b");
  Tape t;
  TokenSequence seq = tiny_sequence(t, model, {0.9, 0.1, 0.8, 0.2});
  ForwardResult fr;
  model.competitive_query_selection(t, seq, 2, fr);
  const Tensor& b = fr.sel_boxes.val();
  // Token 0: center (0.1, 0.3), level-1 base size 0.05. Bitwise equality.
  EXPECT_EQ(b.at(0, 0), 0.1);
  EXPECT_EQ(b.at(0, 1), 0.3);
  EXPECT_EQ(b.at(0, 2), 0.05);
  EXPECT_EQ(b.at(0, 3), 0.05);
  EXPECT_EQ(b.at(1, 0), 0.5);  // token 2 center x = 0.1 + 0.2*2
}

TEST(Selection, KBeyondTokenCountRejected) {
  ModelConfig cfg;
  Model model(cfg, 7);
  Tape t;
  TokenSequence seq = tiny_sequence(t, model, {0.9, 0.1, 0.8, 0.2});
  ForwardResult fr;
  EXPECT_THROW(model.competitive_query_selection(t, seq, 5, fr), Error);
}

TEST(PhiPsi, ScaleExamples) {
  auto [x1, y1] = phi_scale(0.5, 0.5, 8, 8);
  EXPECT_DOUBLE_EQ(x1, 3.5);
  EXPECT_DOUBLE_EQ(y1, 3.5);
  auto [x2, y2] = phi_scale(0.0625, 0.0625, 8, 8);
  EXPECT_DOUBLE_EQ(x2, 0.0);
  EXPECT_DOUBLE_EQ(y2, 0.0);
  auto [x3, y3] = phi_scale(0.0625, 0.0625, 4, 4);
  EXPECT_DOUBLE_EQ(x3, -0.25);
  EXPECT_DOUBLE_EQ(y3, -0.25);
  auto [x4, y4] = phi_scale(0.375, 0.375, 4, 4);
  EXPECT_DOUBLE_EQ(x4, 1.0);
  EXPECT_DOUBLE_EQ(y4, 1.0);
}

TEST(PhiPsi, ConstrainExamples) {
  Box anchor{0.5, 0.5, 0.25, 0.25};
  auto [zx, zy] = psi_constrain(0.0, 0.0, anchor, 8, 8);
  EXPECT_EQ(zx, 0.0);
  EXPECT_EQ(zy, 0.0);
  // Saturated offset reaches half the box extent: 0.125 * 8 = 1 pixel.
  auto [sx, sy] = psi_constrain(50.0, 0.0, anchor, 8, 8);
  EXPECT_NEAR(sx, 1.0, 1e-12);
  EXPECT_EQ(sy, 0.0);
  for (double raw : {-100.0, -1.0, 0.3, 7.0, 1e6}) {
    auto [ox, oy] = psi_constrain(raw, raw, anchor, 8, 8);
    EXPECT_LE(std::fabs(ox), 0.5 * anchor.w * 8);
    EXPECT_LE(std::fabs(oy), 0.5 * anchor.h * 8);
  }
}

TEST(PositionEmbed, DeterministicAndZeroWithZeroMlp) {
  ModelConfig cfg;
  Model model(cfg, 9);
  Tape t;
  Tensor a({2, 4}, {0.4, 0.5, 0.2, 0.3, 0.4, 0.5, 0.2, 0.3});
  Value e = model.position_embed(t, t.constant(a));
  const Tensor& ev = e.val();
  for (size_t c = 0; c < 32; ++c) EXPECT_EQ(ev.at(0, c), ev.at(1, c));

  zero_param(model.params(), "posembed.w1");
  zero_param(model.params(), "posembed.b1");
  zero_param(model.params(), "posembed.w2");
  zero_param(model.params(), "posembed.b2");
  Tape t2;
  Value e2 = model.position_embed(t2, t2.constant(a));
  for (double v : e2.val().data) EXPECT_EQ(v, 0.0);
}

TEST(AnchorRefine, ZeroMlpIsBitwiseIdentity) {
  ModelConfig cfg;
  Model model(cfg, 11);
  zero_param(model.params(), "dec2.refine.w1");
  zero_param(model.params(), "dec2.refine.b1");
  // w2/b2 are zero from construction already.
  Tape t;
  Tensor content({3, 32});
  Rng r(4);
  for (double& v : content.data) v = r.normal();
  Tensor prev({3, 4}, {0.31, 0.42, 0.11, 0.27, 0.5, 0.5, 0.5, 0.5,
                       0.93, 0.08, 0.6, 0.71});
  Value out = model.anchor_refine(t, t.constant(content), t.constant(prev),
                                  "dec2.refine.w1", "dec2.refine.b1",
                                  "dec2.refine.w2", "dec2.refine.b2");
  EXPECT_EQ(out.val().data, prev.data);
}

TEST(AnchorRefine, LogitSpaceShiftExample) {
  ModelConfig cfg;
  Model model(cfg, 11);
  // Force the refinement MLP output to (ln 3, 0, 0, 0): zero the hidden
  // layer so relu(0) = 0, then set the output bias.
  zero_param(model.params(), "dec2.refine.w1");
  zero_param(model.params(), "dec2.refine.b1");
  model.params().at("dec2.refine.b2").value.data[0] = std::log(3.0);
  Tape t;
  Tensor prev({1, 4}, {0.5, 0.5, 0.5, 0.5});
  Value out = model.anchor_refine(t, t.constant(Tensor({1, 32})),
                                  t.constant(prev), "dec2.refine.w1",
                                  "dec2.refine.b1", "dec2.refine.w2",
                                  "dec2.refine.b2");
  EXPECT_NEAR(out.val().at(0, 0), 0.75, 1e-12);
  EXPECT_EQ(out.val().at(0, 1), 0.5);
}

TEST(AnchorRefine, OutputStaysInUnitInterval) {
  ModelConfig cfg;
  Model model(cfg, 13);
  Rng r(8);
  for (double& v : model.params().at("dec2.refine.b2").value.data)
    v = 40.0 * r.normal();
  Tape t;
  Tensor content({5, 32});
  for (double& v : content.data) v = r.normal();
  Tensor prev({5, 4}, 0.5);
  Value out = model.anchor_refine(t, t.constant(content), t.constant(prev),
                                  "dec2.refine.w1", "dec2.refine.b1",
                                  "dec2.refine.w2", "dec2.refine.b2");
  for (double v : out.val().data) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

// Constant feature maps make the attention output independent of where the
// sampling lands, as long as points stay interior.
TEST(Mdca, ConstantMapsIgnoreOffsets) {
  ModelConfig cfg;
  Model model(cfg, 17);
  Tape t;
  std::vector<Pyramid> pyrs(2);
  for (size_t m = 0; m < 2; ++m)
    for (size_t l = 1; l <= 3; ++l) {
      Tensor lvl({cfg.grid(l), cfg.grid(l), 32});
      for (size_t i = 0; i < lvl.data.size(); ++i)
        lvl.data[i] = 0.1 * static_cast<double>(m + (i % 32));
      pyrs[m].levels.push_back(t.constant(std::move(lvl)));
    }
  Rng r(5);
  Tensor content({4, 32}), pos({4, 32});
  for (double& v : content.data) v = r.normal();
  for (double& v : pos.data) v = r.normal();
  Tensor anchors({4, 4});
  for (size_t i = 0; i < 4; ++i) {
    anchors.data[i * 4 + 0] = 0.5;
    anchors.data[i * 4 + 1] = 0.5;
    anchors.data[i * 4 + 2] = 0.3;
    anchors.data[i * 4 + 3] = 0.3;
  }
  Value out1 = model.ms_deformable_attention(
      t, t.constant(content), t.constant(pos), t.constant(anchors), pyrs, 1,
      nullptr);
  for (double& v : model.params().at("dec1.ca.offset.w").value.data)
    v = r.normal();
  Tape t2;
  std::vector<Pyramid> pyrs2(2);
  for (size_t m = 0; m < 2; ++m)
    for (const Value& lvl : pyrs[m].levels)
      pyrs2[m].levels.push_back(t2.constant(lvl.val()));
  Value out2 = model.ms_deformable_attention(
      t2, t2.constant(content), t2.constant(pos), t2.constant(anchors), pyrs2,
      1, nullptr);
  for (size_t i = 0; i < out1.numel(); ++i)
    EXPECT_NEAR(out1.val().data[i], out2.val().data[i], 1e-9);
}

TEST(Mdca, OneHotWeightLooksUpSingleCell) {
  ModelConfig cfg;
  Model model(cfg, 19);
  ParamStore& ps = model.params();
  // Deterministic sampling at the anchor center: zero offsets.
  zero_param(ps, "dec1.ca.offset.w");
  zero_param(ps, "dec1.ca.offset.b");
  // One-hot attention per head: huge bias on one (m,l,k) slot per head.
  zero_param(ps, "dec1.ca.weight.w");
  zero_param(ps, "dec1.ca.weight.b");
  const size_t L = 3, K = 4, LK = L * K;
  // Head 0 -> visible level 1 point 0; head 1 -> infrared level 1 point 0.
  Tensor& wb = ps.at("dec1.ca.weight.b").value;
  wb.data[0 * (2 * LK) + 0 * LK + 0] = 1e4;          // head 0, m=0, l=1, k=0
  wb.data[1 * (2 * LK) + 1 * LK + 0] = 1e4;          // head 1, m=1, l=1, k=0
  std::vector<Pyramid> pyrs(2);
  Tape t;
  Rng r(6);
  for (size_t m = 0; m < 2; ++m)
    for (size_t l = 1; l <= 3; ++l) {
      Tensor lvl({cfg.grid(l), cfg.grid(l), 32});
      for (double& v : lvl.data) v = r.normal();
      pyrs[m].levels.push_back(t.constant(std::move(lvl)));
    }
  // Anchor centered on exact level-1 pixel (4,4): (4+0.5)/8 = 0.5625.
  Tensor anchors({1, 4}, {0.5625, 0.5625, 0.2, 0.2});
  Tensor content({1, 32}), pos({1, 32});
  Value out = model.ms_deformable_attention(
      t, t.constant(content), t.constant(pos), t.constant(anchors), pyrs, 1,
      nullptr);
  // Reference: run the value + output projections on the looked-up cells.
  Tape ref;
  std::vector<Value> head_cells;
  for (size_t h = 0; h < 2; ++h) {
    Tensor cell({1, 32});
    const Tensor& lvl = pyrs[h].levels[0].val();  // head h samples modality h
    for (size_t c = 0; c < 32; ++c) cell.data[c] = lvl.data[(4 * 8 + 4) * 32 + c];
    Value v = add(matmul(ref.constant(cell), ref.leaf(ps.at("dec1.ca.value.w"))),
                  ref.leaf(ps.at("dec1.ca.value.b")));
    head_cells.push_back(slice(v, 1, h * 16, 16));
  }
  Value expect = add(matmul(concat(head_cells, 1),
                            ref.leaf(ps.at("dec1.ca.out.w"))),
                     ref.leaf(ps.at("dec1.ca.out.b")));
  for (size_t c = 0; c < 32; ++c)
    EXPECT_NEAR(out.val().at(0, c), expect.val().at(0, c), 1e-9);
}

TEST(Mdca, WeightsNormalizedAndPointsContained) {
  ModelConfig cfg;
  Model model(cfg, 23);
  Tape t;
  ForwardResult fr = model.model_forward(t, random_image(64, 3, 31),
                                         random_image(64, 1, 32), nullptr,
                                         true);
  ASSERT_EQ(fr.diags.size(), 3u);
  for (const SamplingDiag& d : fr.diags) {
    ASSERT_EQ(d.weights.shape, (Shape{60, 2, 2 * 3 * 4}));
    for (size_t q = 0; q < 60; ++q)
      for (size_t h = 0; h < 2; ++h) {
        double s = 0.0;
        for (size_t j = 0; j < 24; ++j) s += d.weights.data[(q * 2 + h) * 24 + j];
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    ASSERT_EQ(d.points.shape, (Shape{60, 2, 2, 3, 4, 2}));
    const size_t per_q = 2 * 2 * 3 * 4 * 2;
    for (size_t q = 0; q < 60; ++q) {
      const double cx = d.anchors.data[q * 4 + 0];
      const double cy = d.anchors.data[q * 4 + 1];
      const double hw = 0.5 * d.anchors.data[q * 4 + 2];
      const double hh = 0.5 * d.anchors.data[q * 4 + 3];
      for (size_t j = 0; j < per_q; j += 2) {
        EXPECT_LE(std::fabs(d.points.data[q * per_q + j] - cx), hw);
        EXPECT_LE(std::fabs(d.points.data[q * per_q + j + 1] - cy), hh);
      }
    }
  }
}

TEST(Decoder, MaskIsolatesQueryGroups) {
  ModelConfig cfg;
  Model model(cfg, 27);
  const Tensor vis = random_image(64, 3, 41), ir = random_image(64, 1, 42);
  const size_t N = cfg.num_queries, nd = 4, tot = N + nd;
  DnBatch dn;
  dn.labels = {0, 1, 2, 3};
  dn.anchors = Tensor({nd, 4}, 0.4);
  dn.attn_mask = Tensor({tot, tot});
  for (size_t i = 0; i < tot; ++i)
    for (size_t j = 0; j < tot; ++j)
      dn.attn_mask.data[i * tot + j] = ((i < N) != (j < N)) ? 1.0 : 0.0;
  Tape t1;
  ForwardResult fr1 = model.model_forward(t1, vis, ir, &dn);
  DnBatch dn2 = dn;
  dn2.labels = {3, 2, 1, 0};
  for (double& v : dn2.anchors.data) v = 0.7;
  Tape t2;
  ForwardResult fr2 = model.model_forward(t2, vis, ir, &dn2);
  for (size_t d = 0; d < 3; ++d) {
    const Tensor& a = fr1.layers[d].boxes.val();
    const Tensor& b = fr2.layers[d].boxes.val();
    for (size_t i = 0; i < N * 4; ++i) EXPECT_EQ(a.data[i], b.data[i]);
    const Tensor& ca = fr1.layers[d].class_logits.val();
    const Tensor& cb = fr2.layers[d].class_logits.val();
    for (size_t i = 0; i < N * cfg.num_classes; ++i)
      EXPECT_EQ(ca.data[i], cb.data[i]);
  }
}

TEST(Decoder, MaskShapeMismatchRejected) {
  ModelConfig cfg;
  Model model(cfg, 27);
  DnBatch dn;
  dn.labels = {0};
  dn.anchors = Tensor({1, 4}, 0.5);
  dn.attn_mask = Tensor({3, 3});
  Tape t;
  EXPECT_THROW(
      model.model_forward(t, random_image(64, 3, 1), random_image(64, 1, 2), &dn),
      Error);
}

TEST(DetectionHead, ZeroLogitsAndIdentityBox) {
  ModelConfig cfg;
  Model model(cfg, 29);
  zero_param(model.params(), "head.cls.w");
  zero_param(model.params(), "head.cls.b");
  zero_param(model.params(), "head.box.w1");
  zero_param(model.params(), "head.box.b1");
  Tape t;
  Tensor content({2, 32});
  Rng r(3);
  for (double& v : content.data) v = r.normal();
  Tensor anchors({2, 4}, {0.3, 0.4, 0.2, 0.1, 0.6, 0.5, 0.4, 0.3});
  auto [logits, boxes] =
      model.detection_head_forward(t, t.constant(content), t.constant(anchors));
  for (double v : logits.val().data) EXPECT_EQ(v, 0.0);  // sigmoid -> 0.5
  EXPECT_EQ(boxes.val().data, anchors.data);
}

TEST(ModelForward, AnchorsBitStableWithZeroRefinementMlps) {
  ModelConfig cfg;
  Model model(cfg, 31);  // refine.w2/b2 start at zero
  for (size_t d = 2; d <= 3; ++d) {
    zero_param(model.params(), "dec" + std::to_string(d) + ".refine.w1");
    zero_param(model.params(), "dec" + std::to_string(d) + ".refine.b1");
  }
  Tape t;
  ForwardResult fr = model.model_forward(t, random_image(64, 3, 51),
                                         random_image(64, 1, 52));
  const Tensor& first = fr.layers[0].anchors.val();
  for (size_t d = 1; d < 3; ++d)
    EXPECT_EQ(fr.layers[d].anchors.val().data, first.data);
}

TEST(ModelForward, DeterministicAndFinite) {
  ModelConfig cfg;
  Model model(cfg, 33);
  const Tensor vis = random_image(64, 3, 61), ir = random_image(64, 1, 62);
  Tape t1, t2;
  ForwardResult a = model.model_forward(t1, vis, ir);
  ForwardResult b = model.model_forward(t2, vis, ir);
  EXPECT_EQ(a.layers.back().class_logits.val().data,
            b.layers.back().class_logits.val().data);
  EXPECT_EQ(a.layers.back().boxes.val().data, b.layers.back().boxes.val().data);
  EXPECT_EQ(a.sel_tokens, b.sel_tokens);
  for (const LayerOutput& lo : a.layers) {
    for (double v : lo.class_logits.val().data) EXPECT_TRUE(std::isfinite(v));
    for (double v : lo.boxes.val().data) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(ModelForward, QueryCounts) {
  ModelConfig cfg;
  Model model(cfg, 35);
  Tape t;
  ForwardResult fr = model.model_forward(t, random_image(64, 3, 71),
                                         random_image(64, 1, 72));
  EXPECT_EQ(fr.n_matching, 60u);
  EXPECT_EQ(fr.n_dn, 0u);
  EXPECT_EQ(fr.layers.back().boxes.shape(), (Shape{60, 4}));

  DnBatch dn;
  dn.labels = {1, 2};
  dn.anchors = Tensor({2, 4}, 0.5);
  dn.attn_mask = Tensor({62, 62});
  Tape t2;
  ForwardResult fr2 = model.model_forward(t2, random_image(64, 3, 71),
                                          random_image(64, 1, 72), &dn);
  EXPECT_EQ(fr2.n_dn, 2u);
  EXPECT_EQ(fr2.layers.back().boxes.shape(), (Shape{62, 4}));
}

TEST(ModelForward, AblationVariantsRun) {
  for (auto [mcqs, mdca, cqs] : {std::array<bool, 3>{false, true, true},
                                 std::array<bool, 3>{true, false, true},
                                 std::array<bool, 3>{true, true, false},
                                 std::array<bool, 3>{false, false, true}}) {
    ModelConfig cfg;
    cfg.mcqs = mcqs;
    cfg.mdca = mdca;
    cfg.cqs = cqs;
    Model model(cfg, 37);
    Tape t;
    ForwardResult fr = model.model_forward(t, random_image(64, 3, 81),
                                           random_image(64, 1, 82), nullptr,
                                           true);
    const size_t M = mdca ? 2 : 1;
    EXPECT_EQ(fr.diags[0].weights.shape, (Shape{60, 2, M * 3 * 4}));
    for (double v : fr.layers.back().class_logits.val().data)
      EXPECT_TRUE(std::isfinite(v));
  }
  for (ModalityMode mode :
       {ModalityMode::visible_only, ModalityMode::infrared_only}) {
    ModelConfig cfg;
    cfg.modality_mode = mode;
    Model model(cfg, 39);
    Tape t;
    ForwardResult fr = model.model_forward(t, random_image(64, 3, 91),
                                           random_image(64, 1, 92), nullptr,
                                           true);
    EXPECT_EQ(fr.diags[0].weights.shape, (Shape{60, 2, 1 * 3 * 4}));
    EXPECT_EQ(fr.token_info.size(), 84u);
  }
}

// The two modalities' sampling offsets come from disjoint parameter columns:
// perturbing the infrared slice leaves visible sampling points bit-identical.
TEST(ModelForward, ModalityOffsetSlicesAreDisjoint) {
  ModelConfig cfg;
  Model model(cfg, 41);
  const Tensor vis = random_image(64, 3, 95), ir = random_image(64, 1, 96);
  Tape t1;
  ForwardResult a = model.model_forward(t1, vis, ir, nullptr, true);
  const size_t HLK2 = 2 * 3 * 4 * 2;  // per-modality offset block width
  Rng r(7);
  for (size_t d = 1; d <= 3; ++d) {
    Tensor& w = model.params().at("dec" + std::to_string(d) + ".ca.offset.w").value;
    const size_t cols = w.shape[1];
    for (size_t row = 0; row < w.shape[0]; ++row)
      for (size_t c = HLK2; c < cols; ++c)  // columns >= HLK2 are the infrared block
        w.data[row * cols + c] += 0.1 * r.normal();
  }
  Tape t2;
  ForwardResult b = model.model_forward(t2, vis, ir, nullptr, true);
  for (size_t d = 0; d < 3; ++d) {
    const Tensor& pa = a.diags[d].points;
    const Tensor& pb = b.diags[d].points;
    // points layout: [q x M x H x L x K x 2]; slice m=0 must be untouched in
    // layer 0 (deeper layers see changed contents, so only check d==0).
    if (d > 0) break;
    const size_t per_m = 2 * 3 * 4 * 2;
    for (size_t q = 0; q < 60; ++q)
      for (size_t j = 0; j < per_m; ++j)
        EXPECT_EQ(pa.data[q * 2 * per_m + j], pb.data[q * 2 * per_m + j]);
  }
}

TEST(ModelForward, GradCheckOnLogitSum) {
  ModelConfig cfg;
  cfg.num_queries = 12;  // keep the finite-difference loop cheap
  Model model(cfg, 43);
  const Tensor vis = random_image(64, 3, 97), ir = random_image(64, 1, 98);
  // Pin the token selection and the detached proposal anchors so the
  // finite-difference probe measures only the differentiable paths.
  PinnedSelection pin;
  {
    Tape t;
    ForwardResult fr = model.model_forward(t, vis, ir);
    pin.tokens = fr.sel_tokens;
    pin.anchors = fr.sel_boxes.val();
  }
  auto f = [&](bool bw) -> double {
    Tape t;
    ForwardResult fr = model.model_forward(t, vis, ir, nullptr, false, &pin);
    Value loss = add(sum_all(vtanh(fr.layers.back().class_logits)),
                     sum_all(fr.layers.back().boxes));
    if (bw) t.backward(loss);
    return loss.val()[0];
  };
  auto res = grad_check(model.params(), f, 25, 5);
  EXPECT_LT(res.max_rel_error, 1e-4)
      << "worst: " << res.worst_param << "[" << res.worst_coord << "]";
}

}  // namespace
}  // namespace msdet
