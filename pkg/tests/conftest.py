import numpy as np
import pytest

from specpool.shape_io import TriMesh


@pytest.fixture
def equilateral_mesh():
    verts = np.array([[0.0, 0.0, 0.0],
                      [1.0, 0.0, 0.0],
                      [0.5, np.sqrt(3.0) / 2.0, 0.0]])
    return TriMesh(verts, np.array([[0, 1, 2]]))


@pytest.fixture
def right_triangle_mesh():
    # right angle at vertex 0, legs of length 1
    verts = np.array([[0.0, 0.0, 0.0],
                      [1.0, 0.0, 0.0],
                      [0.0, 1.0, 0.0]])
    return TriMesh(verts, np.array([[0, 1, 2]]))


@pytest.fixture
def square_mesh():
    # unit square as two right triangles sharing the diagonal 0-2
    verts = np.array([[0.0, 0.0, 0.0],
                      [1.0, 0.0, 0.0],
                      [1.0, 1.0, 0.0],
                      [0.0, 1.0, 0.0]])
    return TriMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))


@pytest.fixture
def tetra_mesh():
    verts = np.array([[1.0, 1.0, 1.0],
                      [1.0, -1.0, -1.0],
                      [-1.0, 1.0, -1.0],
                      [-1.0, -1.0, 1.0]])
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriMesh(verts, faces)


def random_rotation(rng, d=3):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_spd(rng, d, rank=None):
    m = rng.normal(size=(d, rank or d))
    return m @ m.T / d


def random_simplex(rng, n):
    # dyadic rationals k/2^20: entries and partial sums are exact binary
    # floats, so the vector sums to exactly 1.0
    total = 1 << 20
    p = rng.uniform(0.1, 1.0, size=n)
    k = rng.multinomial(total - n, p / p.sum()) + 1
    return k / float(total)
