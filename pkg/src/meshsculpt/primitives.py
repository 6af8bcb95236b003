"""Procedural template meshes used by the data generator and the test suite.

All generators emit consistently wound (outward counter-clockwise) faces
so spiral orderings are well defined everywhere.
"""

from __future__ import annotations

import numpy as np

from .mesh import MeshSample, TemplateTopology


def make_sphere(rows: int = 22, cols: int = 24, radii=(1.0, 1.0, 1.0)):
    """Latitude/longitude triangulated ellipsoid: (rows-1)*cols + 2 vertices."""
    if rows < 3 or cols < 3:
        raise ValueError("rows and cols must be >= 3")
    rx, ry, rz = radii
    verts = [(0.0, 0.0, rz)]
    for i in range(1, rows):
        phi = np.pi * i / rows
        for j in range(cols):
            theta = 2.0 * np.pi * j / cols
            verts.append(
                (
                    rx * np.sin(phi) * np.cos(theta),
                    ry * np.sin(phi) * np.sin(theta),
                    rz * np.cos(phi),
                )
            )
    verts.append((0.0, 0.0, -rz))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * cols + (j % cols)

    faces = []
    for j in range(cols):
        faces.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, rows - 1):
        for j in range(cols):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    for j in range(cols):
        faces.append((south, ring(rows - 1, j + 1), ring(rows - 1, j)))

    topo = TemplateTopology(len(verts), np.asarray(faces, dtype=np.int32))
    return topo, MeshSample(np.asarray(verts, dtype=np.float64))


def make_icosahedron(radius: float = 1.0):
    """Regular icosahedron (12 vertices, 20 faces)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    raw = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    verts = np.asarray(raw, dtype=np.float64)
    verts *= radius / np.linalg.norm(verts[0])
    faces = np.asarray(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int32,
    )
    return TemplateTopology(12, faces), MeshSample(verts)


def make_octahedron(radius: float = 1.0):
    """Regular octahedron (6 vertices, 8 faces)."""
    verts = np.asarray(
        [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)],
        dtype=np.float64,
    ) * radius
    faces = np.asarray(
        [
            (0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4),
            (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5),
        ],
        dtype=np.int32,
    )
    return TemplateTopology(6, faces), MeshSample(verts)


def make_grid(rows: int, cols: int, spacing: float = 1.0):
    """Planar triangulated grid; vertex (i, j) has index i*cols + j."""
    if rows < 2 or cols < 2:
        raise ValueError("rows and cols must be >= 2")
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    verts = np.stack(
        [jj.ravel() * spacing, -ii.ravel() * spacing, np.zeros(rows * cols)], axis=1
    )
    faces = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            a = i * cols + j
            b = a + 1
            c = a + cols
            d = c + 1
            faces.append((a, c, b))
            faces.append((b, c, d))
    topo = TemplateTopology(rows * cols, np.asarray(faces, dtype=np.int32))
    return topo, MeshSample(verts.astype(np.float64))


def make_fan(n_ring: int, apex_height: float = 0.3, start_angle: float = 0.0):
    """Closed umbrella fan: vertex 0 at the apex, ring vertices 1..n_ring.

    Face winding makes the ring order 1, 2, ..., n_ring counter-clockwise
    seen from above (+z).
    """
    if n_ring < 3:
        raise ValueError("need at least 3 ring vertices")
    verts = [(0.0, 0.0, apex_height)]
    for j in range(n_ring):
        a = start_angle + 2.0 * np.pi * j / n_ring
        verts.append((np.cos(a), np.sin(a), 0.0))
    faces = [(0, 1 + j, 1 + (j + 1) % n_ring) for j in range(n_ring)]
    topo = TemplateTopology(n_ring + 1, np.asarray(faces, dtype=np.int32))
    return topo, MeshSample(np.asarray(verts, dtype=np.float64))
