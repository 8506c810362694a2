"""
test_derev_net.py
Tests für derev_net

Testet:
- DerevNet (Nichtnegativität, Kausalität, null-initialisierter Kontext)
- spectral_subtract / late_target / reconstruct_waveform
- loss_joint (γ-Grenzfälle, Affinität in γ, Gradienten)
- Vortraining, Joint-Fine-Tuning (eingefroren und je Link-Feature), begrenzte Caches
- enhance, Evaluation (Modell + Orakel auf 30 Testbeispielen bei 0.9 s)
"""

import sys
from pathlib import Path

# Projekt-Root zum Path hinzufügen
sys.path.insert(0, str(Path(__file__).parent.parent))

import copy
import dataclasses
import json
import shutil
import tempfile
import unittest

import numpy as np
import soundfile as sf

from autodiff import Tensor
from config import DEFAULT_SETTINGS, InvalidArgumentError, MigrationError, ShapeError
from dataset_synth import build_dataset, synth_speechlike, synthesize_example
from derev_net import (
    DerevNet, DerevNetConfig, JointConfig, JointNet, SpectralCache, build_derev_checkpoint, derev_forward,
    enhance, enhance_file, evaluate, export_eval_pairs, finetune_joint, late_target, loss_joint, mse_loss,
    prepare_joint, pretrain_derev, reconstruct_waveform, spectral_subtract,
)
from layers import check_gradients
from metrics import sdr
from room_acoustics import RoomSpec, decompose_rir, simulate_rir
from signal_core import AudioSignal, CompressedMagnitude, StftConfig, compress_magnitude, istft, stft
from t60_net import (
    FeatureCache, T60Net, class_indices, classification_loss, norm_stats_from_checkpoint, outputs_from_heads,
    train_t60,
)


def _small_derev(n_bins=6, hidden=5, layers=2, seed=0):
    return DerevNet(DerevNetConfig(n_bins=n_bins, lstm_layers=layers, hidden=hidden, dropout=0.0), seed=seed)


class TestDerevNet(unittest.TestCase):
    """Vorwärtsrechnung des Dereverberations-Netzes"""

    def setUp(self):
        self.x = np.abs(np.random.default_rng(0).standard_normal((2, 7, 6)))

    def test_zero_output_layer(self):
        net = _small_derev()
        net.out.params["weight"].data[...] = 0.0
        net.out.params["bias"].data[...] = 0.0
        np.testing.assert_array_equal(derev_forward(net, self.x).data, np.zeros((2, 7, 6)))

    def test_non_negative(self):
        net = _small_derev(seed=3)
        net.out.params["bias"].data[...] = -0.2
        self.assertTrue(np.all(derev_forward(net, self.x).data >= 0.0))

    def test_causal(self):
        """Änderungen ab Frame 4 beeinflussen die Frames 0..3 nicht"""
        net = _small_derev(seed=1)
        changed = self.x.copy()
        changed[:, 4:] += 5.0
        a = derev_forward(net, self.x).data
        b = derev_forward(net, changed).data
        np.testing.assert_array_equal(a[:, :4], b[:, :4])
        self.assertFalse(np.allclose(a[:, 4:], b[:, 4:]))

    def test_zero_context_extension(self):
        net = _small_derev(seed=2)
        before = derev_forward(net, self.x).data
        net.extend_context(3)
        feat = np.random.default_rng(1).standard_normal((2, 3))
        after = derev_forward(net, self.x, feat).data
        np.testing.assert_allclose(after, before, atol=1e-12)
        self.assertEqual(net.cfg.input_dim, 9)

    def test_context_mismatch(self):
        net = _small_derev()
        net.extend_context(3)
        with self.assertRaises(ShapeError):
            derev_forward(net, self.x, np.zeros((2, 4)))
        with self.assertRaises(ShapeError):
            derev_forward(net, np.zeros((2, 7, 5)))

    def test_compressed_magnitude_input(self):
        net = _small_derev()
        out = derev_forward(net, CompressedMagnitude(np.ones((6, 9))))
        self.assertEqual(out.shape, (1, 9, 6))


class TestSubtraction(unittest.TestCase):
    """Tests für spectral_subtract / reconstruct_waveform"""

    def test_examples(self):
        out = spectral_subtract(CompressedMagnitude(np.array([[2.0, 0.3]])), CompressedMagnitude(np.array([[0.5, 0.5]])))
        np.testing.assert_allclose(out.values, [[1.5, 0.0]])

    def test_zero_late(self):
        reverb = CompressedMagnitude(np.random.default_rng(0).random((4, 5)))
        out = spectral_subtract(reverb, CompressedMagnitude(np.zeros((4, 5))))
        np.testing.assert_array_equal(out.values, reverb.values)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            spectral_subtract(CompressedMagnitude(np.ones((4, 5))), CompressedMagnitude(np.ones((4, 6))))

    def test_late_target_residual(self):
        """Subtraktion des Residuums ergibt min(Direkt+Früh, hallig)"""
        rng = np.random.default_rng(5)
        reverb = CompressedMagnitude(rng.random((4, 6)))
        de = CompressedMagnitude(rng.random((4, 6)))
        target = late_target(reverb, de, None)
        self.assertTrue(np.all(target.values >= 0.0))
        np.testing.assert_allclose(spectral_subtract(reverb, target).values,
                                   np.minimum(de.values, reverb.values), atol=1e-12)

    def test_late_target_modes(self):
        late = CompressedMagnitude(np.ones((2, 3)))
        self.assertIs(late_target(CompressedMagnitude(np.ones((2, 3))), None, late, "signal"), late)
        with self.assertRaises(InvalidArgumentError):
            late_target(late, late, late, "early")

    def test_reconstruction_round_trip(self):
        x = synth_speechlike(0.5, 8000, rng_seed=1)
        S = stft(x, StftConfig())
        out = reconstruct_waveform(compress_magnitude(S), S)
        ref = istft(S)
        self.assertEqual(len(out), len(ref))
        np.testing.assert_allclose(out.samples, ref.samples, atol=1e-9)
        interior = slice(480, len(out) - 480)
        np.testing.assert_allclose(out.samples[interior], x.samples[interior], atol=1e-5)

    def test_oracle_reconstruction(self):
        """Betrag und Phase des echten Direkt+Früh-Signals → Direkt+Früh im Innenbereich"""
        room = RoomSpec.random_placement((6.0, 5.0, 4.0), 1.0, 0.5, np.random.default_rng(3))
        parts = decompose_rir(simulate_rir(room, 0.6, 8000))
        ex = synthesize_example(synth_speechlike(0.5, 8000, rng_seed=4), parts)
        S = stft(ex.direct_early, StftConfig())
        out = reconstruct_waveform(compress_magnitude(S), S, length=len(ex.direct_early))
        interior = slice(480, len(out) - 480)
        np.testing.assert_allclose(out.samples[interior], ex.direct_early.samples[interior], atol=1e-5)

    def test_zero_magnitude_silence(self):
        x = synth_speechlike(0.5, 8000, rng_seed=2)
        S = stft(x, StftConfig())
        out = reconstruct_waveform(CompressedMagnitude(np.zeros(S.bins.shape)), S, length=len(x))
        self.assertEqual(len(out), len(x))
        self.assertEqual(float(np.max(np.abs(out.samples))), 0.0)


class TestLossJoint(unittest.TestCase):
    """Tests für loss_joint"""

    classes = [0.3, 0.6, 0.9]

    def setUp(self):
        rng = np.random.default_rng(4)
        self.t60s = np.array([0.3, 0.9, 0.6])
        self.idx = np.array([0, 2, 1])
        self.logits = rng.standard_normal((3, 3))
        self.reg = np.array([0.4, 0.7, 0.5])
        self.late = np.abs(rng.standard_normal((3, 4, 5)))
        self.target = np.abs(rng.standard_normal((3, 4, 5)))

    def _loss(self, gamma, alpha=0.1):
        out = outputs_from_heads(self.reg, self.logits, np.zeros((3, 2)), self.classes)
        return float(loss_joint(out, self.t60s, self.idx, Tensor(self.late), self.target, gamma, alpha).data)

    def test_gamma_limits(self):
        out = outputs_from_heads(self.reg, self.logits, np.zeros((3, 2)), self.classes)
        cls = float(classification_loss(out, self.t60s, self.idx, 0.1).data)
        self.assertAlmostEqual(self._loss(1.0), cls, places=12)
        self.assertAlmostEqual(self._loss(0.0), float(np.mean((self.late - self.target) ** 2)), places=12)

    def test_affine_in_gamma(self):
        self.assertAlmostEqual(self._loss(0.5), 0.5 * (self._loss(0.0) + self._loss(1.0)), places=12)
        self.assertAlmostEqual(self._loss(0.7), 0.7 * self._loss(1.0) + 0.3 * self._loss(0.0), places=12)

    def test_matches_hand_arithmetic(self):
        """γ=0.7, α=0.1 gegen direkt ausgerechnete Skalare"""
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        ce = -np.mean(np.log(p[np.arange(3), self.idx]))
        creg = p @ np.array(self.classes)
        mse_creg = np.mean((creg - self.t60s) ** 2)
        mse_late = np.mean((self.late - self.target) ** 2)
        expected = 0.7 * (0.1 * ce + 0.9 * mse_creg) + 0.3 * mse_late
        self.assertAlmostEqual(self._loss(0.7, 0.1), expected, delta=1e-9)

    def test_invalid_weights(self):
        with self.assertRaises(InvalidArgumentError):
            self._loss(1.5)
        with self.assertRaises(InvalidArgumentError):
            self._loss(0.5, alpha=-0.1)

    def test_gradients(self):
        logits = Tensor(self.logits.copy())
        reg = Tensor(self.reg.copy())
        late = Tensor(self.late.copy())

        def loss_fn():
            out = outputs_from_heads(reg, logits, np.zeros((3, 2)), self.classes)
            return loss_joint(out, self.t60s, self.idx, late, self.target, 0.7, 0.1)

        errors = check_gradients(loss_fn, {"logits": logits, "reg": reg, "late": late})
        self.assertLess(max(errors.values()), 1e-5)


class TestTraining(unittest.TestCase):
    """Vortraining, Fine-Tuning und Inferenz auf einem kleinen Zwei-Klassen-Datensatz"""

    @classmethod
    def setUpClass(cls):
        cls.tmpdir = Path(tempfile.mkdtemp())
        cfg = copy.deepcopy(DEFAULT_SETTINGS["dataset"])
        cfg.update({
            "duration": 0.5,
            "task": "derev",
            "derev_t60s": [0.3, 0.9],
            "rirs_per_cell": {"train": 2, "val": 0, "test": 1},
            "cleans_per_rir": 2,
        })
        cls.manifest = build_dataset(cfg, 5, cls.tmpdir / "data")
        cls.derev_section = dict(DEFAULT_SETTINGS["derev"], lstm_layers=1, hidden=16, dropout=0.0,
                                 batch=4, lr=0.01)
        t60_section = dict(DEFAULT_SETTINGS["t60_net"], channels=[2, 2, 4, 4, 4, 4], cls_hidden1=8,
                           penultimate_dim=4, reg_hidden=4, reg_channels=2)
        cls.t60_ckpt = train_t60(cls.manifest, t60_section, epochs=0, progress=False)
        cls.derev_ckpt = pretrain_derev(cls.manifest, cls.derev_section, epochs=0, progress=False)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmpdir)

    def _jcfg(self, **kw):
        base = dict(gamma=0.7, alpha=0.1, epochs=1, batch=4, lr=0.003)
        base.update(kw)
        return JointConfig(**base)

    def test_dataset_layout(self):
        self.assertEqual(len(self.manifest.rows("train")), 8)
        self.assertEqual(self.manifest.classes, [0.3, 0.9])

    def test_pretrain_overfits_four_examples(self):
        """4 Beispiele, 300 Epochen: MSE des Spätanteils sinkt um mindestens 90%"""
        rows = self.manifest.rows("train")[::2]
        small = dataclasses.replace(self.manifest, examples=rows)
        section = dict(self.derev_section, hidden=32)
        ckpt = pretrain_derev(small, section, epochs=300, seed=1, progress=False)
        self.assertEqual(ckpt.kind, "derev")
        self.assertEqual(len(ckpt.history), 300)
        net = DerevNet.from_checkpoint(ckpt)
        x, y = zip(*(self._spectra(r) for r in rows))
        final = float(mse_loss(derev_forward(net, np.stack(x)), np.stack(y)).data)
        self.assertLessEqual(final, 0.1 * ckpt.header["initial_loss"])

    def _spectra(self, row):
        return SpectralCache(self.manifest).load(row)

    def _joint_eval_loss(self, ckpt):
        net = JointNet.from_checkpoint(ckpt)
        rows = self.manifest.rows("train")
        features = FeatureCache(self.manifest, norm_stats_from_checkpoint(ckpt), net.t60.cfg)
        x, y = SpectralCache(self.manifest).batch(rows)
        out, late = net(features.batch(rows), x)
        return float(loss_joint(out, np.array([r.t60 for r in rows]), class_indices(rows, [0.3, 0.9]),
                                late, y, 0.7, 0.1).data)

    def test_pretrain_zero_epochs(self):
        ckpt = pretrain_derev(self.manifest, self.derev_section, epochs=0, seed=6, progress=False)
        self.assertEqual(ckpt.history, [])
        self.assertIsNone(ckpt.header["initial_loss"])
        fresh = DerevNet(DerevNet.from_checkpoint(ckpt).cfg, seed=6)
        for name, arr in fresh.state_arrays().items():
            np.testing.assert_array_equal(ckpt.tensors[f"derev/{name}"], arr.astype(np.float32))

    def test_pretrain_deterministic(self):
        a = pretrain_derev(self.manifest, self.derev_section, epochs=2, seed=2, progress=False)
        b = pretrain_derev(self.manifest, self.derev_section, epochs=2, seed=2, progress=False)
        self.assertEqual(a.history[-1]["train_loss"], b.history[-1]["train_loss"])

    def test_joint_step_zero_matches_derev(self):
        joint = prepare_joint(self.t60_ckpt, self.derev_ckpt, self.manifest)
        plain = DerevNet.from_checkpoint(self.derev_ckpt)
        x, _ = self._spectra(self.manifest.rows("train")[0])
        feat = np.random.default_rng(0).standard_normal((1, joint.link_dim))
        np.testing.assert_allclose(derev_forward(joint.derev, x[None], feat).data,
                                   derev_forward(plain, x[None]).data, atol=1e-12)
        self.assertEqual(joint.derev.cfg.context_dim, 4)

    def test_link_dims(self):
        for link, dim in (("penultimate", 4), ("regression", 1), ("onehot", 2)):
            joint = prepare_joint(self.t60_ckpt, self.derev_ckpt, self.manifest, link)
            self.assertEqual(joint.derev.cfg.context_dim, dim)

    def test_gamma_one_leaves_derev_unchanged(self):
        ckpt = finetune_joint(self._jcfg(gamma=1.0), self.manifest, t60_ckpt=self.t60_ckpt,
                              derev_ckpt=self.derev_ckpt, progress=False)
        self.assertEqual(ckpt.kind, "joint")
        for name in ("derev/out.weight", "derev/out.bias", "derev/lstm.0.weight"):
            np.testing.assert_array_equal(ckpt.tensors[name], self.derev_ckpt.tensors[name])
        self.assertFalse(np.array_equal(ckpt.tensors["t60/cls_out.0.weight"],
                                        self.t60_ckpt.tensors["t60/cls_out.0.weight"]))

    def test_joint_frozen_t60(self):
        """γ=0.7 mit eingefrorenem T60-Netz: T60-Gewichte unverändert, Eval-Verlust sinkt nach 10 Epochen"""
        jcfg = self._jcfg(epochs=10, freeze_t60=True)
        ckpt = finetune_joint(jcfg, self.manifest, t60_ckpt=self.t60_ckpt, derev_ckpt=self.derev_ckpt,
                              progress=False)
        self.assertEqual(len(ckpt.history), 10)
        self.assertTrue(ckpt.header["joint"]["freeze_t60"])
        for name, arr in self.t60_ckpt.subset("t60/").items():
            np.testing.assert_array_equal(ckpt.tensors[f"t60/{name}"], arr)
        self.assertLess(self._joint_eval_loss(ckpt), ckpt.header["initial_loss"])

    def test_joint_trainable_t60_each_link(self):
        """γ=0.7 mit trainierbarem T60-Netz, für jedes Link-Feature 10 Epochen"""
        for link in ("penultimate", "regression", "onehot"):
            with self.subTest(link=link):
                jcfg = self._jcfg(epochs=10, link_feature=link)
                ckpt = finetune_joint(jcfg, self.manifest, t60_ckpt=self.t60_ckpt, derev_ckpt=self.derev_ckpt,
                                      progress=False)
                self.assertFalse(ckpt.header["joint"]["freeze_t60"])
                self.assertEqual(len(ckpt.history), 10)
                self.assertTrue(all(np.isfinite(h["train_loss"]) for h in ckpt.history))
                self.assertFalse(np.array_equal(ckpt.tensors["t60/cls_out.0.weight"],
                                                self.t60_ckpt.tensors["t60/cls_out.0.weight"]))
                reg_moved = not np.array_equal(ckpt.tensors["t60/reg_fc.0.weight"],
                                               self.t60_ckpt.tensors["t60/reg_fc.0.weight"])
                self.assertEqual(reg_moved, link == "regression")
                self.assertLess(self._joint_eval_loss(ckpt), ckpt.header["initial_loss"])

    def test_joint_parameters_follow_link(self):
        """Regressionszweig nur mit Link "regression" unter den trainierbaren Parametern"""
        for link in ("penultimate", "regression", "onehot"):
            with self.subTest(link=link):
                net = prepare_joint(self.t60_ckpt, self.derev_ckpt, self.manifest, link)
                names = set(net.parameters())
                has_reg = any(n.startswith(("t60/reg_conv.", "t60/reg_fc.")) for n in names)
                self.assertEqual(has_reg, link == "regression")
                self.assertIn("t60/cls_out.0.weight", names)
                self.assertFalse(any(n.startswith("t60/") for n in net.parameters(include_t60=False)))
                self.assertLessEqual(names, set(net.all_parameters()))

    def test_caches_bounded(self):
        rows = self.manifest.rows("train")
        spectra = SpectralCache(self.manifest, max_items=3)
        x, y = spectra.batch(rows)
        self.assertEqual(x.shape[0], len(rows))
        self.assertEqual(len(spectra), 3)
        ex = self.manifest.load_example(rows[0])
        reverb = compress_magnitude(stft(ex.reverberant, self.manifest.stft)).values.T
        de = compress_magnitude(stft(ex.direct_early, self.manifest.stft)).values.T
        np.testing.assert_allclose(y[0], np.maximum(reverb - de, 0.0), atol=1e-9)

        late_y = SpectralCache(self.manifest, target="signal", max_items=1).load(rows[0])[1]
        np.testing.assert_allclose(late_y, compress_magnitude(stft(ex.late, self.manifest.stft)).values.T, atol=1e-9)

        features = FeatureCache(self.manifest, norm_stats_from_checkpoint(self.t60_ckpt),
                                T60Net.from_checkpoint(self.t60_ckpt).cfg, max_items=2)
        self.assertEqual(features.batch(rows).shape[0], len(rows))
        self.assertEqual(len(features), 2)
        with self.assertRaises(InvalidArgumentError):
            SpectralCache(self.manifest, target="early")

    def test_dimension_mismatch(self):
        other = DerevNet(DerevNetConfig(n_bins=100, lstm_layers=1, hidden=8, dropout=0.0))
        bad = build_derev_checkpoint(other, None, self.manifest.stft, self.manifest.sample_rate, 0, [], None)
        with self.assertRaises(MigrationError) as ctx:
            prepare_joint(self.t60_ckpt, bad, self.manifest)
        self.assertIn("n_bins 100", str(ctx.exception))

    def test_enhance(self):
        ckpt = finetune_joint(self._jcfg(epochs=0), self.manifest, t60_ckpt=self.t60_ckpt,
                              derev_ckpt=self.derev_ckpt, progress=False)
        x = self.manifest.load_example(self.manifest.rows("test")[0]).reverberant
        a, meta = enhance(x, ckpt)
        b, _ = enhance(x, ckpt)
        frames = self.manifest.stft.frame_count(len(x))
        self.assertEqual(len(a), (frames - 1) * 120 + 480)
        np.testing.assert_array_equal(a.samples, b.samples)
        self.assertAlmostEqual(sum(meta["class_probs"]), 1.0, places=9)
        self.assertGreaterEqual(meta["t60_creg"], 0.3 - 1e-9)
        self.assertLessEqual(meta["t60_creg"], 0.9 + 1e-9)

    def test_enhance_rate_mismatch(self):
        with self.assertRaises(InvalidArgumentError):
            enhance(AudioSignal(np.zeros(8000), 16000), self.derev_ckpt)

    def test_enhance_needs_derev(self):
        x = AudioSignal(np.random.default_rng(0).standard_normal(4000) * 0.1, 8000)
        with self.assertRaises(InvalidArgumentError):
            enhance(x, self.t60_ckpt)

    def test_enhance_anechoic_passthrough(self):
        """Schätzung 0 für den Spätanteil → Ausgabe = Eingabe im Innenbereich"""
        net = DerevNet.from_checkpoint(self.derev_ckpt)
        net.out.params["weight"].data[...] = 0.0
        net.out.params["bias"].data[...] = 0.0
        ckpt = build_derev_checkpoint(net, None, self.manifest.stft, 8000, 0, [], None)
        x = synth_speechlike(0.5, 8000, rng_seed=9)
        out, meta = enhance(x, ckpt)
        self.assertEqual(meta, {})
        interior = slice(480, len(out) - 480)
        self.assertGreater(sdr(x.samples[interior], out.samples[interior]), 40.0)

    def test_enhance_file_sidecar(self):
        x = self.manifest.load_example(self.manifest.rows("test")[0]).reverberant
        in_path = self.tmpdir / "in.wav"
        sf.write(str(in_path), x.samples, 8000, subtype="FLOAT")
        meta = enhance_file(in_path, self.tmpdir / "out.wav", self.derev_ckpt)
        self.assertTrue((self.tmpdir / "out.wav").exists())
        sidecar = json.loads((self.tmpdir / "out.json").read_text(encoding="utf-8"))
        self.assertEqual(sidecar["checkpoint_kind"], "derev")
        self.assertEqual(meta["checkpoint_kind"], "derev")

    def test_evaluate_model(self):
        ckpt = finetune_joint(self._jcfg(epochs=0), self.manifest, t60_ckpt=self.t60_ckpt,
                              derev_ckpt=self.derev_ckpt, progress=False)
        report = evaluate(self.manifest, "test", ckpt, progress=False)
        self.assertEqual(report.meta["mode"], "joint")
        self.assertEqual(len(report.records), 4)
        self.assertIsNotNone(report.records[0]["t60_reg"])
        self.assertIsNotNone(report.records[0]["sdr_enhanced"])
        self.assertIn("0.90", report.aggregates)

    def test_evaluate_needs_checkpoint(self):
        with self.assertRaises(InvalidArgumentError):
            evaluate(self.manifest, "test", None, oracle=False, progress=False)

    def test_export_pairs(self):
        out_dir = self.tmpdir / "pairs"
        pairs = export_eval_pairs(self.manifest, out_dir, "test", oracle=True, progress=False)
        self.assertEqual(len(pairs), 4)
        ref, fs_ref = sf.read(str(out_dir / pairs[0]["reference"]))
        enh, fs_enh = sf.read(str(out_dir / pairs[0]["enhanced"]))
        self.assertEqual(len(ref), len(enh))
        self.assertEqual(fs_ref, fs_enh)
        self.assertTrue((out_dir / "pairs.json").exists())


class TestOracle(unittest.TestCase):
    """Orakel-Evaluation auf 30 Testbeispielen eines ungesehenen Raums bei T60 0.9 s"""

    @classmethod
    def setUpClass(cls):
        cls.tmpdir = Path(tempfile.mkdtemp())
        cfg = copy.deepcopy(DEFAULT_SETTINGS["dataset"])
        cfg.update({
            "duration": 1.0,
            "task": "derev",
            "derev_t60s": [0.9],
            "rirs_per_cell": {"train": 1, "val": 0, "test": 10},
            "cleans_per_rir": 3,
        })
        cls.manifest = build_dataset(cfg, 11, cls.tmpdir / "data")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmpdir)

    def test_oracle_improves_sdr(self):
        report = evaluate(self.manifest, "test", oracle=True, progress=False)
        self.assertEqual(report.meta["mode"], "oracle")
        self.assertEqual(report.meta["late_target"], "residual")
        self.assertEqual(len(report.records), 30)
        self.assertEqual(report.meta["errors"], [])
        enhanced = np.array([r["sdr_enhanced"] for r in report.records])
        unprocessed = np.array([r["sdr_unprocessed"] for r in report.records])
        self.assertGreater(enhanced.mean(), unprocessed.mean() + 1.0)
        self.assertGreaterEqual(int(np.sum(enhanced > unprocessed)), 24)
        agg = report.aggregates["0.90"]
        self.assertAlmostEqual(agg["sdr_enhanced"]["mean"], float(enhanced.mean()), places=9)
        self.assertIsNone(report.records[0]["t60_reg"])

    def test_unknown_target(self):
        with self.assertRaises(InvalidArgumentError):
            evaluate(self.manifest, "test", oracle=True, progress=False, target="early")


if __name__ == "__main__":
    unittest.main()
