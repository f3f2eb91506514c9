"""OBJ and PLY reading/writing.

Binary PLY (``binary_little_endian 1.0``) is the lossless format for
float32-representable positions; ASCII PLY and OBJ write 17 significant
digits and so also round-trip float64 positions.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..errors import FormatError, MeshError
from .mesh import OrientedPointSet, TriMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_UV_NAMES = (("u", "v"), ("s", "t"), ("texture_u", "texture_v"))


def load_mesh(path: str | os.PathLike) -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        mesh = _read_obj(path)
    elif suffix == ".ply":
        mesh = _read_ply(path)
    else:
        raise FormatError(f"unsupported mesh format {suffix!r} (expected .obj or .ply)")
    if mesh.n_vertices == 0 or mesh.n_triangles == 0:
        raise MeshError(f"{path}: empty mesh ({mesh.n_vertices} vertices, {mesh.n_triangles} triangles)")
    return mesh


def save_mesh(mesh: TriMesh, path: str | os.PathLike, format: str | None = None) -> None:
    """Write ``mesh``; ``format`` is one of ``obj``, ``ply`` (binary) or ``ply-ascii``."""
    path = Path(path)
    fmt = format or {".obj": "obj", ".ply": "ply"}.get(path.suffix.lower())
    if fmt == "obj":
        _write_obj(mesh, path)
    elif fmt in ("ply", "ply-binary"):
        _write_ply(path, mesh.vertices, mesh.triangles, mesh.uvs, mesh.normals, binary=True)
    elif fmt == "ply-ascii":
        _write_ply(path, mesh.vertices, mesh.triangles, mesh.uvs, mesh.normals, binary=False)
    else:
        raise FormatError(f"cannot infer output format for {path}")


def save_points(points: OrientedPointSet, path: str | os.PathLike, binary: bool = True) -> None:
    _write_ply(Path(path), points.points, None, None, points.normals, binary=binary)


def load_points(path: str | os.PathLike) -> OrientedPointSet:
    """Read a vertex-only PLY (or the vertices of any PLY/OBJ) as oriented points."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        v, _, _, n = _parse_ply(path)
    else:
        v, _, _, n = _parse_obj(path)
    if n is None:
        raise FormatError(f"{path}: point file has no normals")
    return OrientedPointSet(v, n)


# ---------------------------------------------------------------- OBJ


def _parse_obj(path: Path):
    pos, tex, nrm = [], [], []
    faces = []  # list of per-face lists of (v, vt, vn) index triples (0-based, -1 = absent)
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    pos.append([float(x) for x in parts[1:4]])
                    if len(pos[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "vt":
                    tex.append([float(x) for x in parts[1:3]])
                    if len(tex[-1]) != 2:
                        raise ValueError("texture coordinate needs 2 components")
                elif tag == "vn":
                    nrm.append([float(x) for x in parts[1:4]])
                    if len(nrm[-1]) != 3:
                        raise ValueError("normal needs 3 components")
                elif tag == "f":
                    corners = []
                    for tok in parts[1:]:
                        fields = tok.split("/")
                        ids = []
                        for k, count in enumerate((len(pos), len(tex), len(nrm))):
                            s = fields[k] if k < len(fields) else ""
                            if s == "":
                                ids.append(-1)
                                continue
                            i = int(s)
                            i = i - 1 if i > 0 else count + i
                            if not 0 <= i < count:
                                raise MeshError(f"{path}: line {lineno}: index {s} out of range (have {count})")
                            ids.append(i)
                        corners.append(ids)
                    if len(corners) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    faces.append(corners)
            except MeshError:
                raise
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: {exc}", line=lineno) from None

    v = np.array(pos, dtype=np.float64).reshape(-1, 3)
    if not faces:
        return v, np.zeros((0, 3), np.int64), None, (np.array(nrm).reshape(-1, 3) if len(nrm) == len(pos) and nrm else None)

    tris = []
    for corners in faces:
        for k in range(1, len(corners) - 1):
            tris.append((corners[0], corners[k], corners[k + 1]))
    corner = np.array(tris, dtype=np.int64).reshape(-1, 3)  # (3T, 3): v, vt, vn
    has_vt = bool(tex) and (corner[:, 1] >= 0).all()
    has_vn = bool(nrm) and (corner[:, 2] >= 0).all()
    key = corner[:, [0] + ([1] if has_vt else []) + ([2] if has_vn else [])]

    # Split vertices only when one position is paired with several vt/vn.
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if len(uniq) == len(np.unique(key[:, 0])):
        verts = v
        tri_idx = key[:, 0]
        uv = nm = None
        if has_vt:
            uv = np.zeros((len(v), 2))
            uv[key[:, 0]] = np.array(tex)[key[:, 1]]
        if has_vn:
            nm = np.zeros((len(v), 3))
            nm[key[:, 0]] = np.array(nrm)[key[:, -1]]
            unused = np.setdiff1d(np.arange(len(v)), key[:, 0])
            nm[unused] = (0.0, 0.0, 1.0)
    else:
        verts = v[uniq[:, 0]]
        tri_idx = inverse
        uv = np.array(tex)[uniq[:, 1]] if has_vt else None
        nm = np.array(nrm)[uniq[:, -1]] if has_vn else None
    if nm is not None:
        nm = nm / np.linalg.norm(nm, axis=1, keepdims=True)
    return verts, tri_idx.reshape(-1, 3), uv, nm


def _read_obj(path: Path) -> TriMesh:
    v, t, uv, n = _parse_obj(path)
    return TriMesh(v, t, uv, n)


def _write_obj(mesh: TriMesh, path: Path) -> None:
    lines = ["# vdmforge"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if mesh.uvs is not None:
        lines += [f"vt {u!r} {w!r}" for u, w in mesh.uvs.tolist()]
    if mesh.normals is not None:
        lines += [f"vn {x!r} {y!r} {z!r}" for x, y, z in mesh.normals.tolist()]
    t = mesh.triangles + 1
    if mesh.uvs is not None and mesh.normals is not None:
        lines += [f"f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}" for a, b, c in t.tolist()]
    elif mesh.uvs is not None:
        lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in t.tolist()]
    elif mesh.normals is not None:
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in t.tolist()]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in t.tolist()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- PLY


def _parse_ply_header(fh, path: Path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise FormatError(f"{path}: missing 'ply' magic", line=1)
    fmt = None
    elements: list[tuple[str, int, list]] = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise FormatError(f"{path}: unterminated header", line=lineno)
        parts = raw.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 3 or parts[2] != "1.0":
                raise FormatError(f"{path}: bad format line", line=lineno)
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise FormatError(f"{path}: unsupported PLY format {fmt}", line=lineno)
        elif parts[0] == "element":
            try:
                elements.append((parts[1], int(parts[2]), []))
            except (IndexError, ValueError):
                raise FormatError(f"{path}: bad element line", line=lineno) from None
        elif parts[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before element", line=lineno)
            try:
                if parts[1] == "list":
                    prop = (parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])
                else:
                    prop = (parts[2], "scalar", _PLY_TYPES[parts[1]], None)
            except (IndexError, KeyError):
                raise FormatError(f"{path}: bad property line", line=lineno) from None
            elements[-1][2].append(prop)
        elif parts[0] == "end_header":
            break
        else:
            raise FormatError(f"{path}: unknown header keyword {parts[0]!r}", line=lineno)
    if fmt is None:
        raise FormatError(f"{path}: header has no format line")
    return fmt, elements, lineno


def _parse_ply(path: Path):
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_ply_header(fh, path)
        data = {}
        if fmt == "ascii":
            text = fh.read().decode("ascii", "replace").splitlines()
            cursor = 0
            for name, count, props in elements:
                rows = []
                for k in range(count):
                    if cursor >= len(text):
                        raise FormatError(f"{path}: truncated {name} data", line=header_lines + cursor + 1)
                    toks = text[cursor].split()
                    cursor += 1
                    try:
                        rows.append(_ascii_row(toks, props))
                    except (ValueError, IndexError):
                        raise FormatError(f"{path}: bad {name} record", line=header_lines + cursor) from None
                data[name] = rows
        else:
            endian = "<" if fmt == "binary_little_endian" else ">"
            buf = fh.read()
            base = fh.tell() - len(buf)
            pos = 0
            for name, count, props in elements:
                rows, pos = _binary_rows(buf, pos, count, props, endian, path, base)
                data[name] = rows

    vert_el = next((e for e in elements if e[0] == "vertex"), None)
    if vert_el is None:
        raise MeshError(f"{path}: no vertex element")
    names = [p[0] for p in vert_el[2]]
    vrows = data["vertex"]
    vcols = vrows if isinstance(vrows, dict) else {n: np.array([r[i] for r in vrows], dtype=np.float64) for i, n in enumerate(names)}

    def col(n):
        return np.asarray(vcols[n], dtype=np.float64)

    try:
        v = np.stack([col("x"), col("y"), col("z")], axis=1) if len(vert_el[2]) else np.zeros((0, 3))
    except KeyError:
        raise FormatError(f"{path}: vertex element lacks x/y/z") from None
    n = None
    if all(k in vcols for k in ("nx", "ny", "nz")):
        n = np.stack([col("nx"), col("ny"), col("nz")], axis=1)
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.divide(n, ln, out=np.tile([0.0, 0.0, 1.0], (len(n), 1)), where=ln > 0)
    uv = None
    for a, b in _UV_NAMES:
        if a in vcols and b in vcols:
            uv = np.stack([col(a), col(b)], axis=1)
            break

    tris = np.zeros((0, 3), np.int64)
    if "face" in data:
        frows = data["face"]
        face_el = next(e for e in elements if e[0] == "face")
        li = next((i for i, p in enumerate(face_el[2]) if p[1] == "list"), None)
        if li is None:
            raise FormatError(f"{path}: face element without index list")
        if isinstance(frows, dict):
            polys = frows[face_el[2][li][0]]
        else:
            polys = [r[li] for r in frows]
        tl = []
        for poly in polys:
            poly = [int(x) for x in poly]
            for k in range(1, len(poly) - 1):
                tl.append((poly[0], poly[k], poly[k + 1]))
        tris = np.array(tl, dtype=np.int64).reshape(-1, 3)
    if len(tris) and (tris.min() < 0 or tris.max() >= len(v)):
        raise MeshError(f"{path}: face index out of range (have {len(v)} vertices)")
    return v, tris, uv, n


def _ascii_row(toks, props):
    row = []
    i = 0
    for _, kind, t1, _t2 in props:
        if kind == "list":
            cnt = int(toks[i])
            row.append([float(x) for x in toks[i + 1:i + 1 + cnt]])
            if len(row[-1]) != cnt:
                raise ValueError
            i += 1 + cnt
        else:
            row.append(float(toks[i]))
            i += 1
    return row


def _binary_rows(buf, pos, count, props, endian, path, base):
    if all(p[1] == "scalar" for p in props):
        dt = np.dtype([(p[0], endian + p[2]) for p in props])
        need = dt.itemsize * count
        if pos + need > len(buf):
            raise FormatError(f"{path}: truncated binary payload", offset=base + len(buf))
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
        return {p[0]: arr[p[0]].astype(np.float64) for p in props}, pos + need
    # Fast path for the common "uchar count + fixed-size triangle" face layout.
    if len(props) == 1 and count:
        name, _, ct, it = props[0]
        cdt, idt = np.dtype(endian + ct), np.dtype(endian + it)
        if pos + cdt.itemsize <= len(buf):
            n0 = int(np.frombuffer(buf, cdt, 1, pos)[0])
            rec = np.dtype([("n", cdt), ("i", idt, (n0,))])
            if pos + rec.itemsize * count <= len(buf):
                arr = np.frombuffer(buf, rec, count, pos)
                if (arr["n"] == n0).all():
                    return {name: arr["i"].astype(np.int64)}, pos + rec.itemsize * count
    rows = []
    for _ in range(count):
        row = []
        for _name, kind, t1, t2 in props:
            if kind == "list":
                dt = np.dtype(endian + t1)
                if pos + dt.itemsize > len(buf):
                    raise FormatError(f"{path}: truncated binary payload", offset=base + pos)
                cnt = int(np.frombuffer(buf, dt, 1, pos)[0])
                pos += dt.itemsize
                dt2 = np.dtype(endian + t2)
                if pos + dt2.itemsize * cnt > len(buf):
                    raise FormatError(f"{path}: truncated binary payload", offset=base + pos)
                row.append(np.frombuffer(buf, dt2, cnt, pos).tolist())
                pos += dt2.itemsize * cnt
            else:
                dt = np.dtype(endian + t1)
                if pos + dt.itemsize > len(buf):
                    raise FormatError(f"{path}: truncated binary payload", offset=base + pos)
                row.append(float(np.frombuffer(buf, dt, 1, pos)[0]))
                pos += dt.itemsize
        rows.append(row)
    return rows, pos


def _read_ply(path: Path) -> TriMesh:
    v, t, uv, n = _parse_ply(path)
    return TriMesh(v, t, uv, n)


def _write_ply(path: Path, vertices, triangles, uvs, normals, *, binary: bool) -> None:
    nv = len(vertices)
    cols = [("x", vertices[:, 0]), ("y", vertices[:, 1]), ("z", vertices[:, 2])]
    if normals is not None:
        cols += [("nx", normals[:, 0]), ("ny", normals[:, 1]), ("nz", normals[:, 2])]
    if uvs is not None:
        cols += [("u", uvs[:, 0]), ("v", uvs[:, 1])]
    nt = 0 if triangles is None else len(triangles)
    fmt = "binary_little_endian" if binary else "ascii"
    ftype = "float" if binary else "double"
    header = ["ply", f"format {fmt} 1.0", "comment vdmforge", f"element vertex {nv}"]
    header += [f"property {ftype} {name}" for name, _ in cols]
    if triangles is not None:
        header += [f"element face {nt}", "property list uchar int vertex_indices"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(head)
            if binary:
                vdt = np.dtype([(name, "<f4") for name, _ in cols])
                rec = np.empty(nv, dtype=vdt)
                for name, c in cols:
                    rec[name] = c
                fh.write(rec.tobytes())
                if triangles is not None:
                    fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
                    frec = np.empty(nt, dtype=fdt)
                    frec["n"] = 3
                    frec["i"] = triangles
                    fh.write(frec.tobytes())
            else:
                table = np.stack([c for _, c in cols], axis=1) if cols else np.zeros((nv, 0))
                fh.write("".join(" ".join(repr(float(x)) for x in row) + "\n" for row in table.tolist()).encode("ascii"))
                if triangles is not None:
                    fh.write("".join(f"3 {a} {b} {c}\n" for a, b, c in np.asarray(triangles).tolist()).encode("ascii"))
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc.strerror}") from exc
