"""
On-disk formats
===============

TSR1 tensors, PGM masks and PPM rasters, pose/assignment/positions/matching
JSON, CSV exports, the NDJSON scene manifest and key=value run files.

Writers emit line-feed-only output. Readers accept LF and CRLF, and every
malformed input raises ``FormatError`` carrying the byte offset, line number or
JSON path of the fault.
"""

import csv
import json
import logging
import math
import re
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from id_match.errors import DomainError, FormatError
from id_match.graph import CharacterMask
from id_match.guidance import Assignment, IdentityBox, Match, NUM_KEYPOINTS, Person, PoseFrame
from id_match.sampling import CharacterPositions

logger = logging.getLogger(__name__)

TSR_MAGIC = "TSR1"
TSR_DTYPE = "f32"

WEIGHTS_FIELDS = ("layer", "j", "i", "weight")
CONSISTENCY_FIELDS = ("layer", "C")
PAIR_INDEX_FIELDS = ("a", "b", "is_swap")
STATS_FIELDS = ("draws", "swap_draws", "swap_fraction")


# ---------------------------------------------------------------- TSR1 tensors

def tensor_to_bytes(t):
    t = torch.as_tensor(t).detach().cpu()
    shape = "shape" + "".join(f" {d}" for d in t.shape)
    header = f"{TSR_MAGIC}\ndtype {TSR_DTYPE}\n{shape}\nend\n".encode("ascii")
    payload = np.ascontiguousarray(t.to(torch.float32).numpy(), dtype="<f4").tobytes()
    return header + payload


def _header_line(data, pos):
    nl = data.find(b"\n", pos)
    if nl < 0:
        raise FormatError("truncated TSR1 header", position=f"byte {pos}")
    raw = data[pos:nl]
    if raw.endswith(b"\r"):
        raw = raw[:-1]
    try:
        return raw.decode("ascii"), nl + 1
    except UnicodeDecodeError:
        raise FormatError("TSR1 header is not ascii", position=f"byte {pos}") from None


def tensor_from_bytes(data):
    pos = 0
    magic, next_pos = _header_line(data, pos)
    if magic != TSR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TSR_MAGIC!r}", position=f"byte {pos}")
    pos = next_pos

    line, next_pos = _header_line(data, pos)
    parts = line.split()
    if len(parts) != 2 or parts[0] != "dtype":
        raise FormatError(f"expected 'dtype {TSR_DTYPE}', got {line!r}", position=f"byte {pos}")
    if parts[1] != TSR_DTYPE:
        raise FormatError(f"unsupported dtype {parts[1]!r}, only {TSR_DTYPE} is stored", position=f"byte {pos}")
    pos = next_pos

    line, next_pos = _header_line(data, pos)
    parts = line.split()
    if not parts or parts[0] != "shape":
        raise FormatError(f"expected a shape line, got {line!r}", position=f"byte {pos}")
    try:
        shape = tuple(int(d) for d in parts[1:])
    except ValueError:
        raise FormatError(f"shape dimensions must be integers, got {line!r}", position=f"byte {pos}") from None
    if any(d < 0 for d in shape):
        raise FormatError(f"negative dimension in {line!r}", position=f"byte {pos}")
    pos = next_pos

    line, next_pos = _header_line(data, pos)
    if line != "end":
        raise FormatError(f"expected 'end', got {line!r}", position=f"byte {pos}")
    pos = next_pos

    count = math.prod(shape)
    found = len(data) - pos
    if found < 4 * count:
        raise FormatError(
            f"payload truncated: shape {' '.join(map(str, shape))} needs {count} values, found {found // 4}",
            position=f"byte {len(data)}",
        )
    if found > 4 * count:
        raise FormatError(
            f"payload has {found - 4 * count} bytes beyond {count} values", position=f"byte {pos + 4 * count}"
        )
    if count == 0:
        return torch.zeros(shape, dtype=torch.float32)
    values = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32)
    return torch.from_numpy(values.reshape(shape))


def write_tensor(path, t):
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tensor(path):
    data = Path(path).read_bytes()
    try:
        return tensor_from_bytes(data)
    except FormatError as e:
        err = FormatError(f"{path}: {e}")
        err.position = e.position
        raise err from None


# ---------------------------------------------------------------- PGM / PPM

def _open_image(path, mode):
    try:
        with Image.open(path) as im:
            im.load()
            if im.format != "PPM" or im.mode != mode:
                kind = "P5 (grayscale)" if mode == "L" else "P6 (rgb)"
                raise FormatError(f"expected a binary {kind} image, got {im.format} {im.mode}", position=str(path))
            return np.array(im)
    except (UnidentifiedImageError, SyntaxError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"unreadable image: {e}", position=str(path)) from None


def write_mask(path, mask):
    grid = mask.grid if isinstance(mask, CharacterMask) else torch.as_tensor(mask)
    pixels = np.where(grid.bool().numpy(), 255, 0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def read_mask(path, identity):
    """Binary P5 mask; any nonzero byte is inside."""
    pixels = _open_image(path, "L")
    return CharacterMask(identity, torch.from_numpy(pixels != 0))


_MASK_ID = re.compile(r"(\d+)$")


def read_mask_dir(directory, prefix=None):
    """Every ``*.pgm`` in ``directory`` (optionally ``{prefix}_k.pgm``); identity k is the trailing integer."""
    directory = Path(directory)
    pattern = f"{prefix}_*.pgm" if prefix else "*.pgm"
    masks = []
    for path in sorted(directory.glob(pattern)):
        match = _MASK_ID.search(path.stem)
        if match is None:
            raise FormatError("mask file name must end in the identity number", position=str(path))
        masks.append(read_mask(path, int(match.group(1))))
    if not masks:
        raise FormatError("no PGM masks found", position=str(directory))
    masks.sort(key=lambda mask: mask.identity)
    return masks


def write_ppm(path, raster):
    raster = np.asarray(raster, dtype=np.uint8)
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise DomainError(f"raster must be h x w x 3, got shape {raster.shape}")
    Image.fromarray(raster).save(path, format="PPM")


def read_ppm(path):
    return _open_image(path, "RGB")


# ---------------------------------------------------------------- JSON helpers

def read_text(path):
    """UTF-8 text of ``path``; undecodable bytes raise FormatError at their offset."""
    data = Path(path).read_bytes()
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"not UTF-8 text: {e.reason}", position=f"{path}: byte {e.start}") from None


def _load_json(path):
    text = read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", position=f"{path}:{e.lineno}:{e.colno}") from None


def _dump_json(path, doc):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def _field(obj, key, where):
    if not isinstance(obj, dict):
        raise FormatError(f"expected an object, got {type(obj).__name__}", position=where)
    if key not in obj:
        raise FormatError(f"missing {key!r}", position=where)
    return obj[key]


def _list(obj, key, where, default=None):
    """obj[key] as a list; absent keys give ``default`` when one is set."""
    if default is not None and isinstance(obj, dict) and key not in obj:
        return default
    value = _field(obj, key, where)
    if not isinstance(value, list):
        raise FormatError(f"expected a list, got {type(value).__name__}", position=f"{where}.{key}")
    return value


def _integers(values, where):
    return [int(_number(v, f"{where}[{k}]")) for k, v in enumerate(values)]


def _number(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"expected a number, got {value!r}", position=where)
    if not math.isfinite(value):
        raise FormatError("non-finite number", position=where)
    return value


# ---------------------------------------------------------------- poses

def parse_poses(doc):
    frames = []
    for f, fdoc in enumerate(_list(doc, "frames", "$")):
        where = f"$.frames[{f}]"
        index = int(_number(_field(fdoc, "index", where), f"{where}.index"))
        persons = []
        for p, pdoc in enumerate(_list(fdoc, "persons", where, default=[])):
            pwhere = f"{where}.persons[{p}]"
            kps = _field(pdoc, "keypoints", pwhere)
            if not isinstance(kps, list) or len(kps) != NUM_KEYPOINTS:
                got = len(kps) if isinstance(kps, list) else type(kps).__name__
                raise FormatError(
                    f"frame {index} person {p}: expected {NUM_KEYPOINTS} keypoints, got {got}",
                    position=f"{pwhere}.keypoints",
                )
            rows = []
            for k, kp in enumerate(kps):
                kwhere = f"{pwhere}.keypoints[{k}]"
                if not isinstance(kp, list) or len(kp) != 3:
                    raise FormatError(f"frame {index} person {p}: keypoint must be [x, y, c]", position=kwhere)
                rows.append([_number(v, kwhere) for v in kp])
            persons.append(Person(np.array(rows, dtype=np.float64)))
        boxes, seen = [], set()
        for b, bdoc in enumerate(_list(fdoc, "boxes", where, default=[])):
            bwhere = f"{where}.boxes[{b}]"
            identity = int(_number(_field(bdoc, "id", bwhere), f"{bwhere}.id"))
            if identity in seen:
                raise FormatError(f"frame {index}: duplicate box id {identity}", position=bwhere)
            seen.add(identity)
            coords = [_number(_field(bdoc, key, bwhere), f"{bwhere}.{key}") for key in ("x0", "y0", "x1", "y1")]
            try:
                boxes.append(IdentityBox(identity, *coords, frame=index))
            except DomainError as e:
                raise FormatError(str(e), position=bwhere) from None
        frames.append(PoseFrame(index=index, persons=persons, boxes=boxes))
    return frames


def poses_to_doc(frames):
    return {
        "frames": [
            {
                "index": frame.index,
                "persons": [{"keypoints": person.keypoints.tolist()} for person in frame.persons],
                "boxes": [
                    {"id": box.identity, "x0": box.x0, "y0": box.y0, "x1": box.x1, "y1": box.y1}
                    for box in frame.boxes
                ],
            }
            for frame in frames
        ]
    }


def read_poses(path):
    return parse_poses(_load_json(path))


def write_poses(path, frames):
    _dump_json(path, poses_to_doc(frames))


# ---------------------------------------------------------------- assignments

def assignments_to_doc(frames, assignments):
    return {
        "frames": [
            {
                "index": frame.index,
                "matches": [{"person": m.person, "id": m.identity, "ratio": m.ratio} for m in assignment.matches],
                "unmatched_persons": list(assignment.unmatched_persons),
                "unmatched_boxes": list(assignment.unmatched_boxes),
            }
            for frame, assignment in zip(frames, assignments)
        ]
    }


def parse_assignments(doc):
    """Returns a list of (frame index, Assignment)."""
    out = []
    for f, fdoc in enumerate(_list(doc, "frames", "$")):
        where = f"$.frames[{f}]"
        matches = []
        for k, mdoc in enumerate(_list(fdoc, "matches", where)):
            mwhere = f"{where}.matches[{k}]"
            matches.append(Match(
                person=int(_number(_field(mdoc, "person", mwhere), mwhere)),
                identity=int(_number(_field(mdoc, "id", mwhere), mwhere)),
                ratio=float(_number(_field(mdoc, "ratio", mwhere), mwhere)),
            ))
        unmatched_persons = _list(fdoc, "unmatched_persons", where, default=[])
        unmatched_boxes = _list(fdoc, "unmatched_boxes", where, default=[])
        out.append((
            int(_number(_field(fdoc, "index", where), where)),
            Assignment(
                matches=matches,
                unmatched_persons=_integers(unmatched_persons, f"{where}.unmatched_persons"),
                unmatched_boxes=_integers(unmatched_boxes, f"{where}.unmatched_boxes"),
            ),
        ))
    return out


def write_assignments(path, frames, assignments):
    _dump_json(path, assignments_to_doc(frames, assignments))


def read_assignments(path):
    return parse_assignments(_load_json(path))


# ---------------------------------------------------------------- positions

def parse_positions(doc):
    positions = []
    for f, fdoc in enumerate(_list(doc, "frames", "$")):
        where = f"$.frames[{f}]"
        entries = []
        for k, cdoc in enumerate(_list(fdoc, "chars", where)):
            cwhere = f"{where}.chars[{k}]"
            entries.append((
                int(_number(_field(cdoc, "id", cwhere), f"{cwhere}.id")),
                float(_number(_field(cdoc, "cx", cwhere), f"{cwhere}.cx")),
            ))
        try:
            positions.append(CharacterPositions(int(_number(_field(fdoc, "index", where), where)), entries))
        except DomainError as e:
            raise FormatError(str(e), position=where) from None
    return positions


def positions_to_doc(positions):
    return {
        "frames": [
            {"index": p.frame, "chars": [{"id": ident, "cx": cx} for ident, cx in p.entries]}
            for p in positions
        ]
    }


def read_positions(path):
    return parse_positions(_load_json(path))


def write_positions(path, positions):
    _dump_json(path, positions_to_doc(positions))


# ---------------------------------------------------------------- ground-truth matching

def matching_to_doc(ref_ids, gen_ids, gt):
    return {
        "ref_ids": [int(i) for i in ref_ids],
        "gen_ids": [int(j) for j in gen_ids],
        "gt": {str(g): str(r) for g, r in sorted(gt.items())},
    }


def parse_matching(doc):
    """Returns (ref_ids, gen_ids, gt) with gt mapping generated identity -> reference identity."""
    try:
        ref_ids = [int(i) for i in _field(doc, "ref_ids", "$")]
        gen_ids = [int(j) for j in _field(doc, "gen_ids", "$")]
        gt = {int(g): int(r) for g, r in _field(doc, "gt", "$").items()}
    except (TypeError, ValueError, AttributeError):
        raise FormatError("identities must be integers", position="$") from None
    return ref_ids, gen_ids, gt


def write_matching(path, ref_ids, gen_ids, gt):
    _dump_json(path, matching_to_doc(ref_ids, gen_ids, gt))


def read_matching(path):
    return parse_matching(_load_json(path))


# ---------------------------------------------------------------- CSV

def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _fmt(value):
    return repr(float(value))


def write_weights_csv(path, graphs):
    rows = []
    for img in graphs:
        weights = img.weights.detach().tolist()
        for j, row in enumerate(weights):
            for i, w in enumerate(row):
                rows.append({"layer": img.layer, "j": j, "i": i, "weight": _fmt(w)})
    write_csv(path, WEIGHTS_FIELDS, rows)


def write_consistency_csv(path, values):
    """``values``: (layer, C) pairs."""
    write_csv(path, CONSISTENCY_FIELDS, [{"layer": layer, "C": _fmt(c)} for layer, c in values])


def write_pair_index_csv(path, index):
    swaps = set(index.swap_pairs)
    rows = [{"a": a, "b": b, "is_swap": int((a, b) in swaps)} for a, b in index.all_pairs]
    write_csv(path, PAIR_INDEX_FIELDS, rows)


def write_stats_csv(path, stats):
    write_csv(path, STATS_FIELDS, [{
        "draws": stats["draws"],
        "swap_draws": stats["swap_draws"],
        "swap_fraction": _fmt(stats["swap_fraction"]),
    }])


# ---------------------------------------------------------------- manifest

def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for entry in entries:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def read_manifest(path):
    entries = []
    for lineno, line in enumerate(read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid manifest entry: {e.msg}", position=f"{path}:{lineno}") from None
        if not isinstance(entry, dict):
            kind = type(entry).__name__
            raise FormatError(f"manifest entry must be an object, got {kind}", position=f"{path}:{lineno}")
        entries.append(entry)
    return entries


# ---------------------------------------------------------------- key=value runs

def read_key_values(path):
    """
    Flat ``key=value`` lines. Blank lines and ``#`` comments are skipped.
    Returns a list of (line number, key, value).
    """
    items = []
    for lineno, line in enumerate(read_text(path).splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise FormatError(f"expected key=value, got {line!r}", position=f"{path}:{lineno}")
        items.append((lineno, key.strip(), value.strip()))
    return items


def write_key_values(path, mapping):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key, value in mapping.items():
            f.write(f"{key}={value}\n")
