"""Architecture structure, execution shapes, ablations and initialization."""

import numpy as np
import pytest

from icc import model as M
from icc import tensor as T
from icc.errors import ConfigError, ShapeError
from icc.flops import count_graph


def small_config(**kw):
    return M.ModelConfig(width_scale=kw.pop("width_scale", 0.25), **kw)


def run_image(graph, params, h, w, seed=0, **kw):
    x = np.random.default_rng(seed).uniform(0, 1, (1, 3, h, w)).astype(np.float32)
    return M.forward(graph, params, x, **kw)


class TestGraphStructure:
    def test_backbone_has_twelve_blocks(self):
        graph = M.build_icc(M.ModelConfig())
        blocks = graph.backbone_blocks()
        assert len(blocks) == 12
        assert blocks[:7] == [
            "stem.conv1", "stem.conv2", "stem.conv3", "stem.pool1",
            "stem.conv4", "stem.conv5", "stem.pool2",
        ]
        assert blocks[7:] == [
            "inception_a1", "inception_a2", "inception_a3", "reduction_b", "inception_c1",
        ]

    def test_taps_exist_and_point_at_real_layers(self):
        graph = M.build_icc(M.ModelConfig())
        names = {l.name for l in graph.layers}
        for tap in ("Feature1", "Feature2", "Feature3", "output"):
            assert graph.taps[tap] in names

    def test_feature1_is_second_maxpool(self):
        graph = M.build_icc(M.ModelConfig())
        layer = graph.layer_map()[graph.taps["Feature1"]]
        assert layer.kind == "maxpool"
        assert layer.name == "stem.pool2"

    def test_inception_channel_arithmetic(self):
        graph = M.build_icc(M.ModelConfig())
        report = count_graph(graph, (3, 256, 256))
        shapes = {l.name: l.out_shape for l in report.layers}
        assert shapes["stem.pool2"] == (192, 32, 32)
        assert shapes["inception_a1.concat"] == (256, 32, 32)  # 64+64+96+32
        assert shapes["inception_a2.concat"] == (288, 32, 32)  # 64+64+96+64
        assert shapes["inception_a3.concat"] == (288, 32, 32)
        assert shapes["reduction_b.concat"] == (768, 16, 16)  # 384+96+288
        assert shapes["inception_c1.concat"] == (768, 16, 16)  # 4 x 192
        assert shapes["fusion"] == (1440, 32, 32)  # 2*192 + 288 + 768
        assert shapes["density"] == (1, 32, 32)

    def test_inception_c_uses_only_factorized_kernels(self):
        graph = M.build_icc(M.ModelConfig())
        for l in graph.layers:
            if l.block == "inception_c1" and l.kind == "conv":
                assert (l.attrs["kh"], l.attrs["kw"]) in ((1, 1), (1, 7), (7, 1)), l.name
            if l.block == "inception_c1":
                assert l.kind in ("conv", "batchnorm", "relu", "avgpool", "concat")

    def test_graph_text_round_trip(self):
        graph = M.build_icc(M.ModelConfig(width_scale=0.5, use_contextual_module=True))
        text = graph.to_text()
        back = M.GraphDescription.from_text(text)
        assert back.taps == graph.taps
        assert back.ablation == graph.ablation
        assert len(back.layers) == len(graph.layers)
        for a,ipt in zip(back.layers, graph.layers):
            assert a == ipt
        assert back.to_text() == text

    def test_text_header_required(self):
        with pytest.raises(ValueError, match="ICCGRAPH"):
            M.GraphDescription.from_text("layer x kind=conv\n")


class TestShapes:
    def test_output_stride_8_when_divisible(self):
        cfg = small_config()
        graph = M.build_icc(cfg)
        params = M.init_parameters(graph, 0)
        for h, w in [(64, 64), (96, 64), (128, 160)]:
            run = run_image(graph, params, h, w)
            assert run.output.shape == (1, 1, h // 8, w // 8)

    def test_predict_density_pads_and_crops(self):
        cfg = small_config()
        graph = M.build_icc(cfg)
        params = M.init_parameters(graph, 0)
        img = np.random.default_rng(3).uniform(0, 1, (3, 100, 130)).astype(np.float32)
        out = M.predict_density(graph, params, img)
        assert out.shape == (13, 17)  # ceil(100/8), ceil(130/8)

    def test_full_width_block_shapes_execute(self):
        graph = M.build_icc(M.ModelConfig())
        params = M.init_parameters(graph, 0)
        run = run_image(graph, params, 128, 128, keep_activations=True)
        acts = run.activations
        assert acts["inception_a1.concat"].shape == (1, 256, 16, 16)
        assert acts["reduction_b.concat"].shape == (1, 768, 8, 8)
        assert acts["inception_c1.concat"].shape == (1, 768, 8, 8)
        assert run.taps["Feature1"].shape == (1, 192, 16, 16)
        assert run.taps["Feature2"].shape == (1, 288, 16, 16)
        assert run.taps["Feature3"].shape == (1, 768, 8, 8)
        assert run.output.shape == (1, 1, 16, 16)

    def test_analyzer_shapes_match_execution(self):
        cfg = small_config()
        graph = M.build_icc(cfg)
        params = M.init_parameters(graph, 0)
        run = run_image(graph, params, 64, 96, keep_activations=True)
        report = count_graph(graph, (3, 64, 96))
        shapes = {l.name: l.out_shape for l in report.layers}
        for name, t in run.activations.items():
            assert shapes[name] == t.shape[1:], name

    def test_wrong_channel_count_rejected(self):
        cfg = small_config()
        graph = M.build_icc(cfg)
        params = M.init_parameters(graph, 0)
        with pytest.raises(ShapeError, match="channels"):
            M.forward(graph, params, np.zeros((1, 4, 64, 64), dtype=np.float32))


class TestContextualModule:
    def _context_graph(self, channels, scales):
        b = M._Builder(1.0)
        b.emit("input", "input", (), dict(channels=channels), channels=channels)
        out = M._contextual_module(b, "input", tuple(scales))
        return M.GraphDescription(layers=b.layers, taps={"output": out})

    def test_single_scale_constant_base(self):
        g = self._context_graph(3, [1])
        params = M.init_parameters(g, 0)
        x = np.full((1, 3, 8, 8), 0.5, dtype=np.float32)
        run = M.forward(g, params, x, keep_activations=True)
        assert run.output.shape == (1, 6, 8, 8)  # 2C channels
        up = run.activations["context.s1.up"].data
        assert np.abs(up - up.mean(axis=(2, 3), keepdims=True)).max() < 1e-6

    def test_zero_convs_give_concat_base_zero(self):
        g = self._context_graph(4, [1, 2])
        params = M.init_parameters(g, 0)
        for name in list(params):
            if name.startswith("context") and (name.endswith(".w") or name.endswith(".b")):
                params[name] = np.zeros_like(params[name])
        x = np.random.default_rng(0).uniform(0, 1, (1, 4, 8, 8)).astype(np.float32)
        run = M.forward(g, params, x)
        out = run.output.data
        assert np.abs(out[:, :4] - x).max() < 1e-7
        assert np.abs(out[:, 4:]).max() < 1e-7

    def test_full_scales_random_base(self):
        g = self._context_graph(6, [1, 2, 3, 6])
        params = M.init_parameters(g, 3)
        x = np.random.default_rng(4).normal(size=(2, 6, 24, 24)).astype(np.float32)
        run = M.forward(g, params, x, keep_activations=True)
        assert run.output.shape == (2, 12, 24, 24)
        assert np.isfinite(run.output.data).all()
        for s in (1, 2, 3, 6):
            gate = run.activations[f"context.s{s}.sigmoid"].data
            assert np.all(gate > 0) and np.all(gate < 1)

    def test_scale_exceeding_extent_rejected(self):
        g = self._context_graph(3, [1, 6])
        params = M.init_parameters(g, 0)
        x = np.zeros((1, 3, 4, 4), dtype=np.float32)
        with pytest.raises(ShapeError):
            M.forward(g, params, x)


class TestDecoder:
    def _decoder_graph(self, cin=64, plan=(16, 8, 4)):
        b = M._Builder(1.0)
        b.emit("input", "input", (), dict(channels=cin), channels=cin)
        x = "input"
        for i, cout in enumerate(plan):
            x = b.conv(f"decoder.conv{i + 1}", x, cout, 1 if i == 0 else 3, bias=True)
            x = b.emit(f"decoder.relu{i + 1}", "relu", [x])
        out = b.emit("density", "channel_sum", [x], channels=1)
        return M.GraphDescription(layers=b.layers, taps={"output": out})

    def test_zero_input_zero_output(self):
        g = self._decoder_graph()
        params = M.init_parameters(g, 0)  # biases start at zero
        run = M.forward(g, params, np.zeros((1, 64, 8, 8), dtype=np.float32))
        assert np.all(run.output.data == 0.0)

    def test_output_non_negative(self):
        g = self._decoder_graph()
        params = M.init_parameters(g, 1)
        x = np.random.default_rng(5).normal(size=(2, 64, 8, 8)).astype(np.float32)
        run = M.forward(g, params, x)
        assert np.all(run.output.data >= 0.0)


class TestAblations:
    def test_no_inception_blocks(self):
        cfg = small_config(use_inception_blocks=False)
        graph = M.build_icc(cfg)
        assert graph.ablation == "no-inception"
        assert "Feature2" not in graph.taps and "Feature3" not in graph.taps
        params = M.init_parameters(graph, 0)
        run = run_image(graph, params, 64, 64)
        assert run.output.shape == (1, 1, 8, 8)

    def test_no_contextual_module(self):
        cfg = small_config(use_contextual_module=False)
        graph = M.build_icc(cfg)
        assert graph.ablation == "no-context"
        assert not any(l.name.startswith("context") for l in graph.layers)
        fusion = graph.layer_map()["fusion"]
        assert len(fusion.inputs) == 2  # Feature2 + upsampled Feature3
        full = M.build_icc(M.ModelConfig(use_contextual_module=False))
        report = count_graph(full, (3, 256, 256))
        shapes = {l.name: l.out_shape for l in report.layers}
        assert shapes["fusion"][0] == 288 + 768
        params = M.init_parameters(graph, 0)
        run = run_image(graph, params, 64, 64)
        assert run.output.shape == (1, 1, 8, 8)

    def test_both_paths_disabled_rejected(self):
        cfg = M.ModelConfig(use_contextual_module=False, use_inception_blocks=False)
        with pytest.raises(ConfigError, match="fusion"):
            M.build_icc(cfg)

    def test_config_validation(self):
        with pytest.raises(ConfigError, match="increasing"):
            M.ModelConfig(contextual_scales=(1, 3, 2))
        with pytest.raises(ConfigError, match=">= 1"):
            M.ModelConfig(contextual_scales=(0, 2))
        with pytest.raises(ConfigError, match="width"):
            M.ModelConfig(width_scale=0.0)


class TestInitialization:
    def test_same_seed_identical(self):
        graph = M.build_icc(small_config())
        a = M.init_parameters(graph, 42)
        b = M.init_parameters(graph, 42)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_different_seeds_differ(self):
        graph = M.build_icc(small_config())
        a = M.init_parameters(graph, 1)
        b = M.init_parameters(graph, 2)
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_bn_and_bias_defaults(self):
        graph = M.build_icc(small_config())
        params = M.init_parameters(graph, 0)
        assert np.all(params["stem.conv1.bn.gamma"] == 1.0)
        assert np.all(params["stem.conv1.bn.beta"] == 0.0)
        assert np.all(params["decoder.conv1.b"] == 0.0)

    def test_density_head_starts_small(self):
        # the conv feeding the summed output initializes at a fraction of the
        # fan-in scale so initial count predictions sit near zero
        graph = M.build_icc(small_config())
        params = M.init_parameters(graph, 0)
        last = max(i for i in range(1, 10) if f"decoder.conv{i}.w" in params)
        head = params[f"decoder.conv{last}.w"]
        body = params["decoder.conv1.w"]
        fan_head = np.prod(head.shape[1:])
        fan_body = np.prod(body.shape[1:])
        assert head.std() < 0.1 * np.sqrt(2.0 / fan_head)
        assert abs(body.std() - np.sqrt(2.0 / fan_body)) < 0.1 * np.sqrt(2.0 / fan_body)

    def test_activations_finite_on_random_input(self):
        graph = M.build_icc(small_config())
        params = M.init_parameters(graph, 7)
        run = run_image(graph, params, 64, 64, seed=9)
        assert np.isfinite(run.output.data).all()

    def test_parameter_count_below_vgg16_frontend(self):
        full = M.build_icc(M.ModelConfig())
        vgg = M.build_vgg16_frontend()
        assert M.parameter_count(full) < M.parameter_count(vgg)


class TestFusionPermutation:
    def test_permuting_taps_and_decoder_channels_is_invariant(self):
        cfg = small_config()
        graph = M.build_icc(cfg)
        params = M.init_parameters(graph, 11)
        x = np.random.default_rng(12).uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)
        base = M.forward(graph, params, x).output.data

        fusion = graph.layer_map()["fusion"]
        report = count_graph(graph, (3, 64, 64))
        shapes = {l.name: l.out_shape for l in report.layers}
        sizes = [shapes[src][0] for src in fusion.inputs]
        # rotate the fusion inputs by one
        perm = [1, 2, 0]
        new_inputs = tuple(fusion.inputs[i] for i in perm)
        layers = [
            M.Layer(l.name, l.kind, new_inputs, l.attrs, l.tap, l.block)
            if l.name == "fusion" else l
            for l in graph.layers
        ]
        permuted = M.GraphDescription(layers=layers, taps=graph.taps, ablation=graph.ablation)

        starts = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        blocks = [np.arange(starts[i], starts[i + 1]) for i in range(len(sizes))]
        order = np.concatenate([blocks[i] for i in perm])
        params2 = dict(params)
        params2["decoder.conv1.w"] = params["decoder.conv1.w"][:, order]

        out = M.forward(permuted, params2, x).output.data
        assert np.abs(out - base).max() < 1e-5

    def test_count_is_sum_of_map(self):
        cfg = small_config()
        graph = M.build_icc(cfg)
        params = M.init_parameters(graph, 0)
        run = run_image(graph, params, 64, 64)
        dmap = run.output.data[0, 0]
        assert abs(dmap.sum() - run.output.data.sum()) < 1e-6
