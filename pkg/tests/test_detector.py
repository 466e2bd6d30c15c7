import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cldet.detector import (BatchTargets, DenseDetector, DenseOutputs, Detection, ModelConfig, NonLocalBlock, ShapeError,
                            assign_targets, decode_boxes, decode_detections, detection_loss, forward, giou,
                            images_to_tensor, load_checkpoint, non_local_block, read_detections,
                            save_checkpoint, stack_targets, varifocal_terms, write_detections)

from helpers import central_difference_check
from oracles import brute_force_assign, ref_iou


def model(**kw):
    torch.manual_seed(0)
    kw.setdefault("num_classes", 3)
    kw.setdefault("channels", 16)
    return DenseDetector(ModelConfig(**kw))


def rand_images(n, size, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, size, size, 3), dtype=np.uint8)


# forward -------------------------------------------------------------------

def test_output_shapes_128():
    outs = forward(model(), rand_images(1, 128))
    assert [tuple(c.shape[-2:]) for c in outs[0].class_scores] == [(16, 16), (8, 8), (4, 4)]
    assert [tuple(r.shape) for r in outs[0].box_regression] == [(4, 16, 16), (4, 8, 8), (4, 4, 4)]
    assert all(torch.isfinite(c).all() for c in outs[0].class_scores)
    assert all((r > 0).all() for r in outs[0].box_regression)


def test_batch_of_two_and_duplicate_images_identical():
    img = rand_images(1, 64)
    outs = forward(model(), np.concatenate([img, img]))
    assert len(outs) == 2
    for a, b in zip(outs[0].class_scores + outs[0].box_regression, outs[1].class_scores + outs[1].box_regression):
        assert a.shape == b.shape
        assert torch.equal(a, b)


def test_indivisible_input_raises_naming_stride():
    with pytest.raises(ShapeError, match="32"):
        forward(model(), rand_images(1, 40))


def test_config_validation():
    for bad in [dict(num_classes=0), dict(num_classes=2, channels=0), dict(num_classes=2, fpn_levels=(16, 8)),
                dict(num_classes=2, fpn_levels=(12,))]:
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    assert ModelConfig(num_classes=2).nonlocal_embed_channels == 32
    assert ModelConfig(num_classes=2).scale_ranges == [(0.0, 64.0), (64.0, 128.0), (128.0, math.inf)]


# non-local block -------------------------------------------------------------

def test_nonlocal_zero_projection_is_identity():
    block = NonLocalBlock(8)
    x = torch.randn(2, 8, 5, 3)
    assert torch.equal(block(x), x)
    single = torch.randn(8, 4, 4)
    assert torch.equal(non_local_block(single, block), single)


def test_nonlocal_attention_rows_stochastic():
    torch.manual_seed(1)
    block = NonLocalBlock(6, 3)
    a = block.attention(torch.randn(2, 6, 4, 5) * 3)
    assert a.shape == (2, 20, 20)
    assert torch.allclose(a.sum(-1), torch.ones(2, 20), atol=1e-6)


def test_nonlocal_permutation_equivariance():
    torch.manual_seed(2)
    block = NonLocalBlock(1, 1)
    torch.nn.init.normal_(block.out.weight)
    x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    block = block.double()
    perm = torch.randperm(16)
    xp = x.reshape(1, 1, 16)[..., perm].reshape(1, 1, 4, 4)
    y = block(x).reshape(1, 1, 16)[..., perm].reshape(1, 1, 4, 4)
    assert torch.allclose(block(xp), y, atol=1e-12)


def test_nonlocal_shape_mismatch():
    with pytest.raises(ShapeError):
        NonLocalBlock(4)(torch.zeros(1, 3, 2, 2))


def test_nonlocal_gradients():
    torch.manual_seed(3)
    block = NonLocalBlock(4, 2).double()
    torch.nn.init.normal_(block.out.weight)
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    params = [x] + list(block.parameters())
    assert central_difference_check(lambda: (block(x) * w).sum(), params) < 1e-3


# heads -----------------------------------------------------------------------

def test_plain_classifier_when_nonlocal_disabled():
    m = model(nonlocal_enabled=False)
    assert m.head.relation is None
    x = torch.randn(1, 16, 4, 4)
    assert torch.equal(m.head.classification_head(x), m.head.cls_logits(m.head.cls_tower(x)))


def test_fresh_nonlocal_head_matches_plain_head():
    with_nl, plain = model(), model(nonlocal_enabled=False)
    plain.load_state_dict(with_nl.state_dict(), strict=False)
    x = torch.randn(1, 16, 4, 4)
    assert torch.equal(with_nl.head.classification_head(x), plain.head.classification_head(x))


def test_zero_final_layer_gives_half_probability():
    m = model()
    torch.nn.init.zeros_(m.head.cls_logits.weight)
    torch.nn.init.zeros_(m.head.cls_logits.bias)
    logits = m.head.classification_head(torch.randn(2, 16, 5, 7))
    assert logits.shape == (2, 3, 5, 7)
    assert torch.equal(torch.sigmoid(logits), torch.full_like(logits, 0.5))


# assignment ------------------------------------------------------------------

def test_assign_empty():
    for lt in assign_targets([], [], (64, 64), (8, 16, 32), ModelConfig(1).scale_ranges):
        assert (lt.labels < 0).all()


def test_assign_whole_image_box():
    (lt,) = assign_targets([(0, 0, 64, 64)], [2], (64, 64), (8,), [(0, math.inf)], radius=1.5)
    ys, xs = np.nonzero(lt.labels >= 0)
    centres = sorted(zip((ys * 8 + 4).tolist(), (xs * 8 + 4).tolist()))
    assert centres == [(28, 28), (28, 36), (36, 28), (36, 36)]
    assert (lt.labels[lt.labels >= 0] == 2).all()
    assert np.allclose(lt.quality[lt.labels >= 0], 1.0)


def test_assign_nested_boxes_inner_wins():
    (lt,) = assign_targets([(0, 0, 64, 64), (20, 20, 44, 44)], [0, 1], (64, 64), (8,), [(0, math.inf)])
    assert lt.labels[3, 3] == 1 and lt.labels[4, 4] == 1
    assert tuple(lt.boxes[3, 3]) == (20, 20, 44, 44)


boxes_st = st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(2, 64), st.integers(2, 64)),
                    min_size=1, max_size=4)


@settings(max_examples=60, deadline=None)
@given(boxes_st)
def test_assign_matches_brute_force(raw):
    boxes = [(x, y, min(64, x + w), min(64, y + h)) for x, y, w, h in raw]
    boxes = [b for b in boxes if b[2] > b[0] and b[3] > b[1]]
    if not boxes:
        return
    ranges = [(0.0, 16.0), (16.0, 32.0), (32.0, math.inf)]
    levels = assign_targets(boxes, list(range(len(boxes))), (64, 64), (8, 16, 32), ranges)
    for lt, stride, (lo, hi) in zip(levels, (8, 16, 32), ranges):
        ref = brute_force_assign(boxes, (64, 64), stride, 1.5, lo, hi)
        # labels equal box indices here, so ties on equal areas must still agree on the box
        got = lt.labels.tolist()
        for row_g, row_r in zip(got, ref):
            for g, r in zip(row_g, row_r):
                if r < 0 or g < 0:
                    assert g == r
                else:
                    a = boxes[g]
                    b = boxes[r]
                    assert (a[2] - a[0]) * (a[3] - a[1]) == (b[2] - b[0]) * (b[3] - b[1])


# losses ----------------------------------------------------------------------

def single_cell(logit, label=-1, quality=0.0, dist=(1.0, 1.0, 1.0, 1.0), box=(0, 0, 1, 1), classes=1):
    out = DenseOutputs(class_scores=[torch.full((1, classes, 1, 1), float(logit), dtype=torch.float64)],
                       box_regression=[torch.tensor(dist, dtype=torch.float64).reshape(1, 4, 1, 1)],
                       strides=(8,))
    tgt = BatchTargets(labels=[torch.tensor([[[label]]])],
                       quality=[torch.tensor([[[quality]]], dtype=torch.float64)],
                       boxes=[torch.tensor(box, dtype=torch.float64).reshape(1, 1, 1, 4)])
    return out, tgt


def test_single_negative_half_probability():
    out, tgt = single_cell(0.0)
    cls, reg = detection_loss(out, tgt)
    assert cls.item() == pytest.approx(0.75 * 0.25 * math.log(2), rel=1e-12)
    assert reg.item() == 0.0


@pytest.mark.parametrize("q", [0.3, 0.7, 1.0])
def test_positive_at_p_equal_q_with_perfect_box(q):
    p = min(q, 1 - 1e-6)
    logit = math.log(p / (1 - p))
    out, tgt = single_cell(logit, label=0, quality=q, dist=(0.5, 0.5, 0.5, 0.5), box=(0, 0, 8, 8))
    cls, reg = detection_loss(out, tgt)
    pc = min(max(p, 1e-6), 1 - 1e-6)
    expected = -q * (q * math.log(pc) + (1 - q) * math.log(1 - pc))
    assert cls.item() == pytest.approx(expected, rel=1e-6)
    assert reg.item() == pytest.approx(0.0, abs=1e-8)  # GIoU carries a 1e-7 stabiliser


def test_all_negative_low_probability_loss_vanishes():
    out, tgt = single_cell(-30.0)
    assert detection_loss(out, tgt)[0].item() < 1e-10


def test_varifocal_terms_clamped_finite():
    t = varifocal_terms(torch.tensor([100.0, -100.0]), torch.tensor([0.0, 1.0]))
    assert torch.isfinite(t).all()
    assert t[1].item() == pytest.approx(-math.log(1e-6), rel=1e-4)


def test_losses_non_negative_random():
    m = model(fpn_levels=(8, 16, 32))
    imgs = rand_images(2, 64, seed=4)
    targets = stack_targets([assign_targets([(5, 5, 40, 30)], [1], (64, 64), m.strides, m.cfg.scale_ranges),
                             assign_targets([], [], (64, 64), m.strides, m.cfg.scale_ranges)])
    cls, reg = detection_loss(m(images_to_tensor(imgs)), targets)
    assert cls.item() >= 0 and reg.item() >= 0


def test_detection_loss_gradients_micro_model():
    m = model(num_classes=2, channels=16, fpn_levels=(4, 8)).double()
    torch.nn.init.normal_(m.head.relation.out.weight, std=0.3)
    img = images_to_tensor(rand_images(1, 8, seed=5)).double()
    targets = stack_targets([assign_targets([(1, 1, 7, 7)], [1], (8, 8), m.strides, m.cfg.scale_ranges)],
                            dtype=torch.float64)
    assert int((targets.labels[0] >= 0).sum()) == 4

    def loss():
        cls, reg = detection_loss(m(img), targets)
        return cls + reg

    params = [m.head.cls_logits.weight, m.head.bbox_pred.weight, m.head.relation.query.weight,
              m.head.relation.out.weight, m.fpn.lateral[0].weight, m.head.scales]
    assert central_difference_check(loss, params, max_coords=20) < 1e-3


def test_loss_decreases_on_fixed_sample():
    m = model(num_classes=2)
    img = images_to_tensor(rand_images(1, 64, seed=6))
    targets = stack_targets([assign_targets([(10, 12, 40, 44), (36, 8, 60, 30)], [0, 1], (64, 64),
                                            m.strides, m.cfg.scale_ranges)])
    opt = torch.optim.SGD(m.parameters(), lr=0.01, momentum=0.9)
    losses = []
    for _ in range(50):
        cls, reg = detection_loss(m(img), targets)
        loss = cls + reg
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]


# giou ------------------------------------------------------------------------

def test_giou_examples():
    assert giou((0, 0, 3, 2), (0, 0, 3, 2)) == 1.0
    assert giou((0, 0, 1, 1), (2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-15)
    assert giou((0, 0, 2, 2), (100, 100, 102, 102)) < -0.9
    with pytest.raises(ValueError):
        giou((0, 0, 0, 1), (0, 0, 1, 1))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=8, max_size=8))
def test_giou_bounds_and_symmetry(v):
    a = (v[0], v[1], v[0] + 1 + v[2], v[1] + 1 + v[3])
    b = (v[4], v[5], v[4] + 1 + v[6], v[5] + 1 + v[7])
    g = giou(a, b)
    assert -1 < g <= 1
    assert g == pytest.approx(giou(b, a), abs=1e-12)
    assert g <= ref_iou(a, b) + 1e-12


# decoding --------------------------------------------------------------------

def dense(logits, dists, stride=8):
    return DenseOutputs(class_scores=[torch.as_tensor(logits, dtype=torch.float64)],
                        box_regression=[torch.as_tensor(dists, dtype=torch.float64)], strides=(stride,))


def test_decode_nothing_above_threshold():
    out = dense(torch.full((2, 4, 4), -10.0), torch.ones(4, 4, 4))
    assert decode_detections(out, (32, 32), score_threshold=0.5) == []


def test_decode_identical_candidates_nms():
    logits = torch.full((1, 1, 2), -20.0)
    logits[0, 0, 0] = math.log(0.9 / 0.1)
    logits[0, 0, 1] = math.log(0.8 / 0.2)
    d = torch.zeros(4, 1, 2)
    # both cells decode to (0, 0, 16, 8)
    d[:, 0, 0] = torch.tensor([0.5, 0.5, 1.5, 0.5])
    d[:, 0, 1] = torch.tensor([1.5, 0.5, 0.5, 0.5])
    dets = decode_detections(dense(logits, d), (8, 16), score_threshold=0.05, nms_iou=0.5)
    assert len(dets) == 1
    assert dets[0].score == pytest.approx(0.9)
    assert dets[0].box == pytest.approx((0, 0, 16, 8))


def test_decode_single_peak_brute_force():
    logits = torch.full((2, 4, 4), -12.0)
    logits[1, 2, 1] = 4.0
    d = torch.rand(4, 4, 4, generator=torch.Generator().manual_seed(0)) + 0.2
    dets = decode_detections(dense(logits, d), (32, 32), score_threshold=0.3)
    assert len(dets) == 1
    cx, cy = 1 * 8 + 4, 2 * 8 + 4
    l, t, r, b = (d[:, 2, 1] * 8).tolist()
    assert dets[0].label == 1
    assert dets[0].box == pytest.approx((cx - l, cy - t, cx + r, cy + b))
    assert dets[0].score == pytest.approx(1 / (1 + math.exp(-4)))


def test_decode_max_detections_and_sorting():
    logits = torch.linspace(-1, 3, 16).reshape(1, 4, 4)
    d = torch.full((4, 4, 4), 0.25)
    dets = decode_detections(dense(logits, d), (32, 32), score_threshold=0.0, max_detections=5)
    assert len(dets) == 5
    assert [x.score for x in dets] == sorted((x.score for x in dets), reverse=True)
    with pytest.raises(ValueError):
        decode_detections(dense(logits, d), (32, 32), score_threshold=1.5)


def test_decode_boxes_clipped_to_image():
    logits = torch.full((1, 1, 1), 5.0)
    dets = decode_detections(dense(logits, torch.full((4, 1, 1), 3.0)), (8, 8))
    assert dets[0].box == (0.0, 0.0, 8.0, 8.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 52), st.integers(0, 52), st.integers(10, 60), st.integers(10, 60)),
                min_size=1, max_size=3, unique_by=lambda t: (t[0], t[1])))
def test_decode_of_assigned_targets_recovers_boxes(raw):
    boxes = [(x, y, min(64, x + w), min(64, y + h)) for x, y, w, h in raw]
    boxes = [b for b in boxes if b[2] - b[0] >= 10 and b[3] - b[1] >= 10]
    strides, ranges = (8, 16, 32), ModelConfig(1).scale_ranges
    levels = assign_targets(boxes, list(range(len(boxes))), (64, 64), strides, ranges)
    covered = {int(v) for lt in levels for v in lt.labels[lt.labels >= 0]}
    logits, dists = [], []
    for lt, s in zip(levels, strides):
        h, w = lt.labels.shape
        lg = torch.full((len(raw), h, w), -20.0, dtype=torch.float64)
        dd = torch.ones(4, h, w, dtype=torch.float64)
        for y, x in zip(*np.nonzero(lt.labels >= 0)):
            lg[lt.labels[y, x], y, x] = 20.0
            cx, cy = x * s + s / 2, y * s + s / 2
            bx = lt.boxes[y, x]
            dd[:, y, x] = torch.tensor([cx - bx[0], cy - bx[1], bx[2] - cx, bx[3] - cy]) / s
        logits.append(lg.unsqueeze(0))
        dists.append(dd.unsqueeze(0))
    out = DenseOutputs(class_scores=logits, box_regression=dists, strides=strides).per_image()[0]
    dets = decode_detections(out, (64, 64), score_threshold=0.5)
    for k in covered:
        best = max((ref_iou(d.box, boxes[k]) for d in dets if d.label == k), default=0.0)
        assert best >= 0.9


# persistence -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = model(fpn_levels=(8, 16))
    path = save_checkpoint(m, tmp_path / "m.pt")
    m2 = load_checkpoint(path)
    assert m2.cfg == m.cfg
    x = images_to_tensor(rand_images(1, 32))
    assert torch.equal(m(x).class_scores[0], m2(x).class_scores[0])


def test_detection_dump_round_trip(tmp_path):
    dets = {"v_0": [Detection((0.0, 1.0, 5.5, 6.0), 2, 0.3), Detection((1.0, 1.0, 2.0, 2.0), 0, 0.9)],
            "v_1": [Detection((3.0, 3.0, 4.0, 4.0), 1, 0.5)]}
    path = write_detections(tmp_path / "d.jsonl", dets)
    back = read_detections(path)
    assert back["v_0"] == sorted(dets["v_0"], key=lambda d: -d.score)
    assert back["v_1"] == dets["v_1"]
    (tmp_path / "bad.jsonl").write_text('{"image_id": "a"}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_detections(tmp_path / "bad.jsonl")


def test_decode_boxes_layout():
    d = torch.ones(2, 4, 1, 2)
    b = decode_boxes(d, 8)
    assert b.shape == (2, 1, 2, 4)
    assert b[0, 0, 1].tolist() == [4.0, -4.0, 20.0, 12.0]
