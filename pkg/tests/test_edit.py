"""Instance-level edits: transforms, layer management, texture swap."""

import copy

import numpy as np
import pytest

from pimg import document, edit, render
from pimg.errors import (BackgroundImmutable, MissingGrid, PimgError,
                         SingularTransform)


def _fg(doc):
    return doc.foregrounds()[0]


class TestAffine:
    def test_identity_bit_exact(self, fitted_doc):
        doc, _, _ = fitted_doc
        out = edit.affine_layer(doc, _fg(doc).id, np.eye(2), (0.0, 0.0))
        a, b = _fg(doc), _fg(out)
        assert np.array_equal(a.boundary.points, b.boundary.points)
        assert np.array_equal(a.mesh.vertices, b.mesh.vertices)
        assert np.array_equal(a.global_nodes, b.global_nodes)
        assert np.array_equal(render.render_image(doc).data,
                              render.render_image(out).data)

    def test_scale_doubles_centroid_distances(self, fitted_doc):
        doc, _, _ = fitted_doc
        out = edit.affine_layer(doc, _fg(doc).id, 2.0 * np.eye(2), (0.0, 0.0))
        p0 = _fg(doc).boundary.points.astype(np.float64)
        p1 = _fg(out).boundary.points.astype(np.float64)
        c = p0.mean(axis=0)
        d0 = np.linalg.norm(p0 - c, axis=1)
        d1 = np.linalg.norm(p1 - c, axis=1)
        assert np.allclose(d1, 2.0 * d0, atol=1e-6)

    def test_rotation_oracle(self, fitted_doc):
        doc, _, _ = fitted_doc
        R = np.array([[0.0, -1.0], [1.0, 0.0]])   # 90 deg CCW
        out = edit.affine_layer(doc, _fg(doc).id, R, (0.0, 0.0))
        p0 = _fg(doc).boundary.points.astype(np.float64)
        p1 = _fg(out).boundary.points.astype(np.float64)
        c = p0.mean(axis=0)
        assert np.allclose(p1, (p0 - c) @ R.T + c, atol=1e-6)
        # rotations preserve pairwise control-point distances
        d0 = np.linalg.norm(p0[:, None] - p0[None, :], axis=2)
        d1 = np.linalg.norm(p1[:, None] - p1[None, :], axis=2)
        assert np.allclose(d0, d1, atol=1e-6)

    def test_singular_rejected(self, fitted_doc):
        doc, _, _ = fitted_doc
        with pytest.raises(SingularTransform):
            edit.affine_layer(doc, _fg(doc).id, np.zeros((2, 2)), (0, 0))

    def test_background_immutable(self, fitted_doc):
        doc, _, _ = fitted_doc
        with pytest.raises(BackgroundImmutable):
            edit.affine_layer(doc, doc.background.id, np.eye(2), (0, 0))

    def test_input_not_mutated(self, fitted_doc):
        doc, _, _ = fitted_doc
        before = document.serialize(doc)
        edit.affine_layer(doc, _fg(doc).id, 2 * np.eye(2), (0.1, 0.1))
        assert document.serialize(doc) == before

    def test_composition(self, fitted_doc):
        doc, _, _ = fitted_doc
        lid = _fg(doc).id
        A = np.array([[1.1, 0.0], [0.0, 0.9]])
        B = np.array([[np.cos(0.3), -np.sin(0.3)],
                      [np.sin(0.3), np.cos(0.3)]])
        two = edit.affine_layer(edit.affine_layer(doc, lid, A, (0.02, 0.0)),
                                lid, B, (0.0, 0.01))
        # composed control points: apply both maps about the moving centroid
        p = _fg(doc).boundary.points.astype(np.float64)
        c = p.mean(axis=0)
        p1 = (p - c) @ A.T + c + [0.02, 0.0]
        c1 = p1.mean(axis=0)
        p2 = (p1 - c1) @ B.T + c1 + [0.0, 0.01]
        assert np.allclose(_fg(two).boundary.points, p2, atol=1e-5)


class TestRemove:
    def test_only_fg_leaves_background(self, fitted_doc):
        doc, _, _ = fitted_doc
        out = edit.remove_layer(doc, _fg(doc).id)
        img = render.render_image(out)
        bg_img, cov = render.render_layer(doc, doc.background.id)
        assert cov.all()
        assert np.array_equal(img.data, bg_img.data)

    def test_unowned_pixels_bit_identical(self, fitted_three_layer):
        doc, _, _, _ = fitted_three_layer
        lay = doc.foregrounds()[0]
        out = edit.remove_layer(doc, lay.id)
        base = render.render_image(doc)
        after = render.render_image(out)
        centers = render._pixel_centers(doc.width, doc.height,
                                        doc.width, doc.height)
        owner = render.resolve_layers(doc, centers).reshape(doc.height,
                                                            doc.width)
        untouched = owner != lay.id
        assert np.array_equal(base.data[untouched], after.data[untouched])

    def test_remove_then_undo_restores(self, fitted_doc):
        doc, _, _ = fitted_doc
        snapshot = copy.deepcopy(doc)
        out = edit.remove_layer(doc, _fg(doc).id)
        assert len(out.layers) == len(doc.layers) - 1
        # undo by restoring the snapshot: renders bit-identical
        assert np.array_equal(render.render_image(snapshot).data,
                              render.render_image(doc).data)


class TestDuplicate:
    def test_zero_offset_render_unchanged(self, fitted_doc):
        doc, _, _ = fitted_doc
        out = edit.duplicate_layer(doc, _fg(doc).id, (0.0, 0.0))
        assert len(out.layers) == len(doc.layers) + 1
        assert np.array_equal(render.render_image(out).data,
                              render.render_image(doc).data)

    def test_duplicate_in_front_of_source(self, fitted_doc):
        doc, _, _ = fitted_doc
        src = _fg(doc)
        out = edit.duplicate_layer(doc, src.id, (0.0, 0.0))
        ids = [l.id for l in out.layers]
        dup_id = max(ids)
        assert ids.index(dup_id) == ids.index(src.id) - 1

    def test_offset_copy_matches_shifted_pixels(self, fitted_doc):
        doc, _, _ = fitted_doc
        src = _fg(doc)
        dx_px = 8
        t = (dx_px / doc.width, 0.0)
        out = edit.duplicate_layer(doc, src.id, t)
        base = render.render_image(doc)
        after = render.render_image(out)
        _, cov = render.render_layer(doc, src.id)
        shifted = np.zeros_like(cov)
        shifted[:, dx_px:] = cov[:, :-dx_px]
        # interior of the translated footprint shows the source content
        from scipy import ndimage
        inner = ndimage.binary_erosion(shifted, np.ones((3, 3), bool))
        inner[:, :dx_px] = False
        moved = after.data[:, dx_px:][inner[:, dx_px:]]
        orig = base.data[:, :-dx_px][inner[:, dx_px:]]
        assert np.abs(moved - orig).max() <= 2e-2
        assert np.abs(moved - orig).mean() <= 2e-3


class TestSwapTexture:
    def test_geometry_bit_identical(self, fitted_three_layer):
        doc, _, _, _ = fitted_three_layer
        a, b = doc.foregrounds()[:2]
        out = edit.swap_texture(doc, a.id, b.id)
        na = out.layer_by_id(a.id)
        assert np.array_equal(na.boundary.points, a.boundary.points)
        assert np.array_equal(na.mesh.vertices, a.mesh.vertices)
        assert np.array_equal(na.bbox, a.bbox)

    def test_self_swap_idempotent(self, fitted_three_layer):
        doc, _, _, _ = fitted_three_layer
        a = doc.foregrounds()[0]
        out = edit.swap_texture(doc, a.id, a.id)
        na = out.layer_by_id(a.id)
        assert np.array_equal(na.baked_global, a.baked_global)
        assert np.array_equal(na.baked_local, a.baked_local)

    def test_swap_changes_features(self, fitted_three_layer):
        doc, _, _, _ = fitted_three_layer
        a, b = doc.foregrounds()[:2]
        out = edit.swap_texture(doc, a.id, b.id)
        na = out.layer_by_id(a.id)
        assert not np.array_equal(na.baked_local, a.baked_local)

    def test_missing_grid(self, fitted_three_layer):
        doc, _, _, _ = fitted_three_layer
        bad = copy.deepcopy(doc)
        a, b = bad.foregrounds()[:2]
        b.grid = None
        with pytest.raises(MissingGrid):
            edit.swap_texture(bad, a.id, b.id)


class TestReorder:
    def test_reorder_moves_layer(self, fitted_three_layer):
        doc, _, _, _ = fitted_three_layer
        fgs = doc.foregrounds()
        out = edit.reorder_layer(doc, fgs[-1].id, 0)
        assert out.layers[0].id == fgs[-1].id
        assert out.layers[-1].role == "background"

    def test_depths_rewritten_in_order(self, fitted_three_layer):
        doc, _, _, _ = fitted_three_layer
        fgs = doc.foregrounds()
        out = edit.reorder_layer(doc, fgs[0].id, len(fgs) - 1)
        depths = [l.mean_depth for l in out.foregrounds()]
        assert depths == sorted(depths)


class TestEditLocality:
    def test_affine_locality(self, fitted_three_layer):
        doc, _, _, _ = fitted_three_layer
        lay = doc.foregrounds()[0]
        out = edit.affine_layer(doc, lay.id, 1.3 * np.eye(2), (0.05, 0.0))
        base = render.render_image(doc)
        after = render.render_image(out)
        centers = render._pixel_centers(doc.width, doc.height,
                                        doc.width, doc.height)
        size = (doc.width, doc.height)
        norm = centers / [doc.width, doc.height]
        old_fp = render.point_in_shape(lay.boundary, norm, size)
        new_fp = render.point_in_shape(out.layer_by_id(lay.id).boundary,
                                       norm, size)
        outside = (~(old_fp | new_fp)).reshape(doc.height, doc.width)
        assert np.array_equal(base.data[outside], after.data[outside])


class TestOpsJson:
    def test_round_trip(self):
        op = edit.EditOp(kind="affine", layer=1,
                         T=np.array([[2.0, 0.0], [0.0, 2.0]]),
                         t=np.array([0.1, -0.2]))
        back = edit.EditOp.from_json(op.to_json())
        assert back.kind == "affine" and back.layer == 1
        assert np.allclose(back.T, op.T) and np.allclose(back.t, op.t)

    def test_unknown_kind_rejected(self):
        with pytest.raises(PimgError):
            edit.EditOp.from_json({"kind": "teleport", "layer": 0})

    def test_load_ops_list_and_single(self, tmp_path):
        import json
        p = tmp_path / "ops.json"
        p.write_text(json.dumps([{"kind": "remove", "layer": 2},
                                 {"kind": "duplicate", "layer": 2,
                                  "t": [0.1, 0.0]}]))
        ops = edit.load_ops(p)
        assert [o.kind for o in ops] == ["remove", "duplicate"]
        p.write_text(json.dumps({"kind": "remove", "layer": 1}))
        assert len(edit.load_ops(p)) == 1

    def test_apply_op_dispatch(self, fitted_doc):
        doc, _, _ = fitted_doc
        lid = _fg(doc).id
        out = edit.apply_op(doc, edit.EditOp(kind="remove", layer=lid))
        assert all(l.id != lid for l in out.layers)
