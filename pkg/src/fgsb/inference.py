"""Source-only synthesis: repeated prediction plus noise, no target access."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from pydantic import Field

from .bridge import DEFAULT_NFE, DEFAULT_TAU, inference_transition
from .config import StrictModel
from .models import ModelBundle


class InferenceConfig(StrictModel):
    nfe: int = Field(DEFAULT_NFE, ge=1)
    tau: float = Field(DEFAULT_TAU, ge=0, allow_inf_nan=False)
    seed: int = 0
    batch_size: int = Field(8, ge=1)


class SynthesisError(RuntimeError):
    pass


def stream_seed(seed: int, index: int) -> int:
    """Seed of the independent noise stream for slice ``index``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _as_batch(source) -> tuple[torch.Tensor, int]:
    x = torch.as_tensor(np.asarray(source) if not isinstance(source, torch.Tensor) else source)
    nd = x.dim()
    if nd == 2:
        x = x[None, None]
    elif nd == 3:
        x = x[:, None]
    elif nd != 4:
        raise ValueError(f"expected a 2D slice or a batch, got shape {tuple(x.shape)}")
    return x, nd


def _check(bundle: ModelBundle, x: torch.Tensor, nfe: int) -> None:
    if bundle.canvas is not None and tuple(x.shape[-2:]) != tuple(bundle.canvas):
        raise ValueError(f"input {tuple(x.shape[-2:])} does not match training canvas {tuple(bundle.canvas)}")
    if nfe - 1 > bundle.generator.max_step:
        raise ValueError(f"nfe={nfe} exceeds the {bundle.generator.max_step + 1} steps the generator was trained for")


@torch.no_grad()
def _chain(bundle: ModelBundle, x: torch.Tensor, nfe: int, tau: float, gens: list[torch.Generator]):
    g = bundle.generator
    ref = next(g.parameters())
    x = x.to(device=ref.device, dtype=ref.dtype)
    x_hat = x
    for i in range(nfe):
        if tau > 0:
            z = torch.cat([torch.randn(1, g.z_dim, generator=gen, dtype=ref.dtype) for gen in gens]).to(ref.device)
        else:
            # noiseless chain: latent held at its mean so the output depends on (source, weights) only
            z = torch.zeros(x.shape[0], g.z_dim, dtype=ref.dtype, device=ref.device)
        x_hat = g(x, i, z)
        if i < nfe - 1:
            x = torch.cat([inference_transition(x_hat[j:j + 1], tau, gen) for j, gen in enumerate(gens)])
    return x_hat


def synthesize(source, bundle: ModelBundle, config: InferenceConfig):
    """Translate one slice (or a batch sharing one noise stream per item).

    ``x <- source``; for ``i`` in ``0..nfe-1``: ``x_hat <- G(x, i, z)``,
    ``x <- x_hat + N(0, tau)``. Returns the last prediction with the input's
    layout and array type (2D numpy in, 2D numpy out). With ``tau == 0`` the
    latent is fixed at zero and the result no longer depends on the seed.
    """
    x, nd = _as_batch(source)
    _check(bundle, x, config.nfe)
    bundle.generator.eval()
    gens = [torch.Generator().manual_seed(config.seed if k == 0 else stream_seed(config.seed, k))
            for k in range(x.shape[0])]
    out = _chain(bundle, x, config.nfe, config.tau, gens).cpu()
    out = out[0, 0] if nd == 2 else out[:, 0] if nd == 3 else out
    return out if isinstance(source, torch.Tensor) else out.numpy()


def synthesize_stack(sources: Sequence, bundle: ModelBundle, config: InferenceConfig) -> list[np.ndarray]:
    """Synthesize slices with independent per-slice streams, preserving order.

    Slice ``i`` uses seed ``stream_seed(config.seed, i)``, so it equals
    ``synthesize(sources[i], bundle, config with that seed)``.
    """
    outputs: list[np.ndarray] = []
    bundle.generator.eval()
    bs = config.batch_size
    for start in range(0, len(sources), bs):
        chunk = sources[start:start + bs]
        try:
            x = torch.stack([_as_batch(s)[0][0] for s in chunk])
            _check(bundle, x, config.nfe)
        except Exception as exc:
            # locate the offending slice
            for k, s in enumerate(chunk):
                try:
                    _check(bundle, _as_batch(s)[0], config.nfe)
                except Exception as inner:
                    raise SynthesisError(f"slice {start + k}: {inner}") from inner
            raise SynthesisError(f"slices {start}..{start + len(chunk) - 1}: {exc}") from exc
        gens = [torch.Generator().manual_seed(stream_seed(config.seed, start + k)) for k in range(len(chunk))]
        out = _chain(bundle, x, config.nfe, config.tau, gens).cpu()
        outputs.extend(o[0].numpy() for o in out)
    return outputs
