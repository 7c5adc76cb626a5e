"""Compact network zoo: translation generators and discriminators, the stereo
and flow estimators with their refinement pyramids, and a frozen random-weight
feature extractor for perceptual distances.

All parameters initialize uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from
the builder's seeded generator, so identical seeds give identical networks.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .autograd import Tensor, concat
from .errors import ConfigError


class Network:
    """Named parameter bag with a role tag; subclasses define forward passes."""

    role = "network"

    def __init__(self, seed: int, frozen: bool = False):
        self.seed = seed
        self.frozen = frozen
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(np.random.PCG64(seed))

    def _conv(self, name: str, cin: int, cout: int, k: int):
        bound = 1.0 / np.sqrt(cin * k * k)
        w = self._rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        b = self._rng.uniform(-bound, bound, size=(1, cout, 1, 1)).astype(np.float32)
        req = not self.frozen
        self.params[name + ".w"] = Tensor(w, requires_grad=req)
        self.params[name + ".b"] = Tensor(b, requires_grad=req)

    def _deconv(self, name: str, cin: int, cout: int, k: int = 4):
        bound = 1.0 / np.sqrt(cin * k * k)
        w = self._rng.uniform(-bound, bound, size=(cin, cout, k, k)).astype(np.float32)
        b = self._rng.uniform(-bound, bound, size=(1, cout, 1, 1)).astype(np.float32)
        req = not self.frozen
        self.params[name + ".w"] = Tensor(w, requires_grad=req)
        self.params[name + ".b"] = Tensor(b, requires_grad=req)

    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return K.conv2d(x, self.params[name + ".w"], self.params[name + ".b"],
                        stride=stride, pad=self.params[name + ".w"].shape[2] // 2)

    def deconv(self, name: str, x: Tensor) -> Tensor:
        return K.conv_transpose2d(x, self.params[name + ".w"], self.params[name + ".b"],
                                  stride=2, pad=1)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            tensor.data = values[name].astype(np.float32).reshape(tensor.shape)


class Generator(Network):
    """Residual encoder-decoder translator, output in [0, 1].

    Taps export the two encoder activations and the last residual block
    (scales 1/2, 1/4, 1/4) for the feature warping losses.
    """

    role = "generator"
    n_taps = 3

    def __init__(self, seed: int, channels_base: int = 8):
        if channels_base < 4:
            raise ConfigError(f"channels_base must be >= 4, got {channels_base}")
        super().__init__(seed)
        cb = self.cb = channels_base
        self._conv("enc1", 3, cb, 3)
        self._conv("enc2", cb, 2 * cb, 3)
        for i in range(3):
            self._conv(f"res{i}a", 2 * cb, 2 * cb, 3)
            self._conv(f"res{i}b", 2 * cb, 2 * cb, 3)
        self._deconv("dec1", 2 * cb, cb)
        self._deconv("dec2", cb, 3)

    def forward(self, x: Tensor, need_output: bool = True):
        e1 = K.leaky_relu(self.conv("enc1", x, stride=2), 0.1)
        e2 = K.leaky_relu(self.conv("enc2", e1, stride=2), 0.1)
        r = e2
        for i in range(3):
            h = K.leaky_relu(self.conv(f"res{i}a", r), 0.1)
            r = r + self.conv(f"res{i}b", h)
        taps = [e1, e2, r]
        if not need_output:
            return None, taps
        d1 = K.leaky_relu(self.deconv("dec1", r), 0.1)
        out = (K.tanh(self.deconv("dec2", d1)) + 1.0) * 0.5
        return out, taps

    def translate(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]


class Discriminator(Network):
    """Four stride-2 convolutions to a one-channel sigmoid patch map."""

    role = "discriminator"

    def __init__(self, seed: int, channels_base: int = 8):
        if channels_base < 4:
            raise ConfigError(f"channels_base must be >= 4, got {channels_base}")
        super().__init__(seed)
        cb = self.cb = channels_base
        self._conv("c1", 3, cb, 3)
        self._conv("c2", cb, 2 * cb, 3)
        self._conv("c3", 2 * cb, 4 * cb, 3)
        self._conv("c4", 4 * cb, 1, 3)

    def forward(self, x: Tensor) -> Tensor:
        h = K.leaky_relu(self.conv("c1", x, stride=2), 0.2)
        h = K.leaky_relu(self.conv("c2", h, stride=2), 0.2)
        h = K.leaky_relu(self.conv("c3", h, stride=2), 0.2)
        return K.sigmoid(self.conv("c4", h, stride=2))


class _PyramidNet(Network):
    """Shared two-scale encoder plus a three-stage coarse-to-fine decoder."""

    def __init__(self, seed: int, channels_base: int):
        if channels_base < 4:
            raise ConfigError(f"channels_base must be >= 4, got {channels_base}")
        super().__init__(seed)
        self.cb = channels_base

    def _build_encoder(self):
        cb = self.cb
        self._conv("enc1", 3, cb, 3)
        self._conv("enc2", cb, 2 * cb, 3)

    def _encode(self, img: Tensor):
        f1 = K.leaky_relu(self.conv("enc1", img, stride=2), 0.1)
        f2 = K.leaky_relu(self.conv("enc2", f1, stride=2), 0.1)
        return f1, f2

    @staticmethod
    def _match_features(f: Tensor) -> Tensor:
        # channel-normalized features keep the correlation volume's peak
        # structure independent of local feature magnitude; without this the
        # displacement signal is too weak to train at desk scale
        return f / K.sqrt(K.square(f).mean(axis=1) + 1e-6)

    def _build_decoder(self, corr_ch: int, out_ch: int):
        cb = self.cb
        self._conv("dq", corr_ch + 2 * cb, 2 * cb, 3)
        self._conv("pq", 2 * cb, out_ch, 3)
        self._deconv("uh", 2 * cb, cb)
        self._conv("dh", cb + cb + out_ch, cb, 3)
        self._conv("ph", cb, out_ch, 3)
        self._deconv("uf", cb, cb)
        self._conv("df", cb + 3 + out_ch, cb, 3)
        self._conv("pf", cb, out_ch, 3)

    def _decode(self, corr: Tensor, f2: Tensor, f1: Tensor, img: Tensor, rectify):
        tq = K.leaky_relu(self.conv("dq", concat([corr, f2])), 0.1)
        s0 = rectify(self.conv("pq", tq))
        uh = K.leaky_relu(self.deconv("uh", tq), 0.1)
        th = K.leaky_relu(self.conv("dh", concat([uh, f1, K.upsample2(s0) * 2.0])), 0.1)
        s1 = rectify(self.conv("ph", th))
        uf = K.leaky_relu(self.deconv("uf", th), 0.1)
        tf_ = K.leaky_relu(self.conv("df", concat([uf, img, K.upsample2(s1) * 2.0])), 0.1)
        s2 = rectify(self.conv("pf", tf_))
        return [s0, s1, s2]


class StereoNet(_PyramidNet):
    """Correlation-based disparity estimator; stages are non-negative."""

    role = "stereo"

    def __init__(self, seed: int, max_disp: int = 16, channels_base: int = 8):
        if max_disp < 4 or max_disp % 4:
            raise ConfigError(f"max_disp must be >= 4 and divisible by 4, got {max_disp}")
        super().__init__(seed, channels_base)
        self.max_disp = max_disp
        self.corr_disp = max_disp // 4
        self._build_encoder()
        self._build_decoder(self.corr_disp + 1, 1)

    def forward(self, left: Tensor, right: Tensor):
        f1l, f2l = self._encode(left)
        _, f2r = self._encode(right)
        corr = K.correlation(self._match_features(f2l), self._match_features(f2r),
                             self.corr_disp)
        return self._decode(corr, f2l, f1l, left, K.softplus)


class FlowNet(_PyramidNet):
    """Two-frame flow estimator with signed horizontal+vertical correlation."""

    role = "flow"

    def __init__(self, seed: int, max_flow: int = 8, channels_base: int = 8):
        if max_flow < 4 or max_flow % 4:
            raise ConfigError(f"max_flow must be >= 4 and divisible by 4, got {max_flow}")
        super().__init__(seed, channels_base)
        self.max_flow = max_flow
        self.corr_disp = max(1, max_flow // 4)
        self._build_encoder()
        self._build_decoder(2 * (2 * self.corr_disp + 1), 2)

    def forward(self, frame_t: Tensor, frame_t1: Tensor):
        f1a, f2a = self._encode(frame_t)
        _, f2b = self._encode(frame_t1)
        na = self._match_features(f2a)
        nb = self._match_features(f2b)
        ch = K.correlation(na, nb, self.corr_disp, axis=3, signed=True)
        cv = K.correlation(na, nb, self.corr_disp, axis=2, signed=True)
        corr = concat([ch, cv])
        return self._decode(corr, f2a, f1a, frame_t, lambda t: t)


class Extractor(Network):
    """Frozen random-weight conv stack; activations at scales 1/1, 1/2, 1/4
    with channel counts 8, 16, 32."""

    role = "extractor"

    def __init__(self, seed: int = 77):
        super().__init__(seed, frozen=True)
        self._conv("c1", 3, 8, 3)
        self._conv("c2", 8, 16, 3)
        self._conv("c3", 16, 32, 3)

    def features(self, image: Tensor):
        t1 = K.leaky_relu(self.conv("c1", image), 0.1)
        t2 = K.leaky_relu(self.conv("c2", t1, stride=2), 0.1)
        t3 = K.leaky_relu(self.conv("c3", t2, stride=2), 0.1)
        return [t1, t2, t3]


def build_generator(seed: int, channels_base: int = 8) -> Generator:
    return Generator(seed, channels_base)


def build_discriminator(seed: int, channels_base: int = 8) -> Discriminator:
    return Discriminator(seed, channels_base)


def build_stereo_net(seed: int, max_disp: int = 16, channels_base: int = 8) -> StereoNet:
    return StereoNet(seed, max_disp, channels_base)


def build_flow_net(seed: int, max_flow: int = 8, channels_base: int = 8) -> FlowNet:
    return FlowNet(seed, max_flow, channels_base)


def build_extractor(seed: int = 77) -> Extractor:
    return Extractor(seed)
