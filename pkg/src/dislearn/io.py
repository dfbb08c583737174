"""On-disk artifacts: datasets, reduced bases, and trained networks.

Every artifact is a directory with a JSON manifest plus flat little-endian
float64 binary arrays in row-major order.  Manifests carry sha256 checksums
of the binaries and, when produced by the CLI, the configuration digest, so
downstream stages can refuse stale or corrupted inputs.  Large Jacobian
stacks are loaded as read-only memmaps to keep memory bounded.
"""

import hashlib
import json
import os

import numpy as np

from . import field, pde

MEMMAP_THRESHOLD_BYTES = 1 << 28  # load J lazily above 256 MB


class IntegrityError(RuntimeError):
    """Checksum or digest mismatch in a stored artifact."""


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_array(path, arr):
    np.ascontiguousarray(arr, dtype="<f8").tofile(path)
    return _sha256(path)


def _read_array(path, shape, checksum=None, memmap=False):
    if checksum is not None and _sha256(path) != checksum:
        raise IntegrityError(f"checksum mismatch for {path}")
    if memmap:
        return np.memmap(path, dtype="<f8", mode="r", shape=shape)
    return np.fromfile(path, dtype="<f8").reshape(shape)


def config_digest(obj):
    """Stable digest of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _dump_manifest(dirpath, manifest):
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_manifest(dirpath):
    with open(os.path.join(dirpath, "manifest.json")) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# sample sets
# ---------------------------------------------------------------------------

def save_samples(samples, dirpath, digest=None):
    """Write a SampleSet as manifest.json + X.bin, Y.bin[, J.bin]."""
    os.makedirs(dirpath, exist_ok=True)
    checksums = {
        "X.bin": _write_array(os.path.join(dirpath, "X.bin"), samples.X),
        "Y.bin": _write_array(os.path.join(dirpath, "Y.bin"), samples.Y),
    }
    if samples.has_jacobians():
        checksums["J.bin"] = _write_array(os.path.join(dirpath, "J.bin"), samples.J)
    manifest = {
        "kind": "samples",
        "problem": samples.problem.kind,
        "coefficients": samples.problem.coefficients,
        "covariance": samples.cov.params(),
        "n_el": samples.problem.mesh.n_el,
        "seed": samples.seed,
        "N": samples.N,
        "jacobians": samples.has_jacobians(),
        "newton_iters": samples.newton_iters.tolist(),
        "checksums": checksums,
    }
    if digest is not None:
        manifest["config_digest"] = digest
    _dump_manifest(dirpath, manifest)


def load_samples(dirpath, verify=True):
    """Read a SampleSet; J comes back memmapped when large."""
    man = _load_manifest(dirpath)
    if man.get("kind") != "samples":
        raise IntegrityError(f"{dirpath} is not a sample set")
    mesh = field.assemble_mesh(man["n_el"])
    cp = man["covariance"]
    cov = field.build_covariance(mesh, cp["a_delta"], cp["a_I"], cp["alpha"])
    problem = pde.make_problem(man["problem"], mesh)
    N, d = man["N"], mesh.d
    cks = man["checksums"] if verify else {}
    X = _read_array(os.path.join(dirpath, "X.bin"), (N, d), cks.get("X.bin"))
    Y = _read_array(os.path.join(dirpath, "Y.bin"), (N, d), cks.get("Y.bin"))
    J = None
    if man["jacobians"]:
        jpath = os.path.join(dirpath, "J.bin")
        big = os.path.getsize(jpath) > MEMMAP_THRESHOLD_BYTES
        J = _read_array(jpath, (N, d, d), cks.get("J.bin"), memmap=big)
    return pde.SampleSet(problem=problem, cov=cov, seed=man["seed"], N=N,
                         X=X, Y=Y, J=J,
                         newton_iters=np.asarray(man["newton_iters"], dtype=np.int64))


# ---------------------------------------------------------------------------
# reduced bases
# ---------------------------------------------------------------------------

def save_basis(basis, dirpath, digest=None, provenance=None):
    os.makedirs(dirpath, exist_ok=True)
    checksums = {
        "cols.bin": _write_array(os.path.join(dirpath, "cols.bin"), basis.cols),
        "eigs.bin": _write_array(os.path.join(dirpath, "eigs.bin"), basis.eigs),
        "mean.bin": _write_array(os.path.join(dirpath, "mean.bin"), basis.mean),
    }
    manifest = {
        "kind": "basis",
        "basis_kind": basis.kind,
        "source": basis.source,
        "r": basis.r,
        "d": basis.cols.shape[0],
        "n_el": basis.mesh.n_el,
        "covariance": basis.cov.params() if basis.cov is not None else None,
        "checksums": checksums,
    }
    if provenance:
        manifest["provenance"] = provenance
    if digest is not None:
        manifest["config_digest"] = digest
    _dump_manifest(dirpath, manifest)


def load_basis(dirpath, verify=True):
    from . import reduction

    man = _load_manifest(dirpath)
    if man.get("kind") != "basis":
        raise IntegrityError(f"{dirpath} is not a basis")
    mesh = field.assemble_mesh(man["n_el"])
    cov = None
    if man["covariance"] is not None:
        cp = man["covariance"]
        cov = field.build_covariance(mesh, cp["a_delta"], cp["a_I"], cp["alpha"])
    d, r = man["d"], man["r"]
    cks = man["checksums"] if verify else {}
    cols = _read_array(os.path.join(dirpath, "cols.bin"), (d, r), cks.get("cols.bin"))
    eigs = _read_array(os.path.join(dirpath, "eigs.bin"), (d,), cks.get("eigs.bin"))
    mean = _read_array(os.path.join(dirpath, "mean.bin"), (d,), cks.get("mean.bin"))
    return reduction.ReducedBasis(kind=man["basis_kind"], source=man["source"],
                                  r=r, cols=cols, eigs=eigs, mean=mean,
                                  mesh=mesh, cov=cov)


# ---------------------------------------------------------------------------
# latent networks
# ---------------------------------------------------------------------------

def save_network(net, dirpath, digest=None, schedule_digest=None, extra=None):
    os.makedirs(dirpath, exist_ok=True)
    flat = np.concatenate([w.ravel() for w in net.weights]
                          + [b.ravel() for b in net.biases])
    checksums = {"params.bin": _write_array(os.path.join(dirpath, "params.bin"), flat)}
    manifest = {
        "kind": "network",
        "r": net.r,
        "depth": net.depth,
        "width": net.width,
        "activation": net.activation,
        "checksums": checksums,
    }
    if schedule_digest is not None:
        manifest["schedule_digest"] = schedule_digest
    if digest is not None:
        manifest["config_digest"] = digest
    if extra:
        manifest.update(extra)
    _dump_manifest(dirpath, manifest)


def load_network(dirpath, verify=True):
    from . import surrogate

    man = _load_manifest(dirpath)
    if man.get("kind") != "network":
        raise IntegrityError(f"{dirpath} is not a network")
    net = surrogate.LatentNetwork.zeros(man["r"], man["depth"], man["width"],
                                        man["activation"])
    cks = man["checksums"] if verify else {}
    total = sum(w.size for w in net.weights) + sum(b.size for b in net.biases)
    flat = _read_array(os.path.join(dirpath, "params.bin"), (total,),
                       cks.get("params.bin"))
    net.set_flat(flat)
    return net
