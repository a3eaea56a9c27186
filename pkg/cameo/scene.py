# -*- coding: utf-8 -*-
'''
Synthetic multi-view scenes with analytic ground truth.

Cameras follow the OpenCV pinhole convention: x_cam = R x_world + t, the
camera looks down +z, +x is right and +y is down in the image. Pixel (row v,
column u) has its centre at image coordinate (u, v), so a camera with an
integer principal point sends the principal-point pixel straight down its
optical axis. World units are meters.
'''

# Standard library imports
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple

# Third party imports
import numpy as np

# Local imports
from .errors import SpreadError

log = logging.getLogger(__name__)

EPS = 1e-9
LIGHT_DIR = np.array([0.4, 0.8, 0.45]) / np.linalg.norm([0.4, 0.8, 0.45])

# Fixed world-space texture frequencies (radians per meter) and phases.
TEXTURE_FREQS = np.array([
    [14.0, 3.0, -6.0],
    [-4.0, 12.0, 7.0],
    [6.0, -8.0, 13.0],
    [10.0, 10.0, -4.0],
    [-12.0, 5.0, 9.0],
    [3.0, -13.0, -8.0],
    [9.0, 4.0, 12.0],
])
TEXTURE_PHASES = np.array([0.3, 1.7, 2.9, 0.9, 2.2, 1.1, 0.5])


@dataclass
class Camera:
    '''Pinhole camera with world-to-camera extrinsics.'''

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError('R is not orthonormal')
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise ValueError('R must have determinant +1')
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError('focal lengths must be positive')
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError('principal point outside the image')

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_deg=35.0,
                width=64, height=64):
        '''Camera at `eye` looking at `target` with a horizontal field of
        view of `fov_deg` and a centred principal point.'''

        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if np.linalg.norm(np.cross(forward, up)) < 1e-6:
            up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(
            fx=focal,
            fy=focal,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            R=R,
            t=-R @ eye,
            width=width,
            height=height,
        )

    @property
    def center(self):
        '''Camera centre in world space.'''
        return -self.R.T @ self.t

    def scaled(self, res):
        '''Same camera with intrinsics rescaled to res = (H, W).'''

        h, w = res
        sx = w / float(self.width)
        sy = h / float(self.height)
        return Camera(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            R=self.R,
            t=self.t,
            width=w,
            height=h,
        )

    def pixel_rays(self):
        '''Unit world-space ray directions through every pixel centre.

        Returns:
            height x width x 3 array
        '''

        v, u = np.meshgrid(
            np.arange(self.height, dtype=np.float64),
            np.arange(self.width, dtype=np.float64),
            indexing='ij',
        )
        local = np.stack([
            (u - self.cx) / self.fx,
            (v - self.cy) / self.fy,
            np.ones_like(u),
        ], axis=-1)
        dirs = local @ self.R
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)

    def project(self, points):
        '''Project world points to pixel coordinates.

        Returns:
            (uv, depth): N x 2 array of (u, v) and N camera-space depths
        '''

        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        local = points @ self.R.T + self.t
        depth = local[:, 2]
        with np.errstate(divide='ignore', invalid='ignore'):
            u = self.fx * local[:, 0] / depth + self.cx
            v = self.fy * local[:, 1] / depth + self.cy
        return np.stack([u, v], axis=-1), depth

    def to_dict(self):
        return dict(
            fx=float(self.fx), fy=float(self.fy),
            cx=float(self.cx), cy=float(self.cy),
            R=[[float(x) for x in row] for row in self.R],
            t=[float(x) for x in self.t],
            width=int(self.width), height=int(self.height),
        )

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: float = 0.8

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)

    def intersect(self, origin, dirs):
        '''Distance along unit rays to the first hit, inf on a miss.'''

        oc = origin - self.center
        b = dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        near = -b - root
        far = -b + root
        s = np.where(near > EPS, near, np.where(far > EPS, far, np.inf))
        return np.where(disc >= 0.0, s, np.inf)

    def normal(self, points):
        n = points - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def to_dict(self):
        return dict(kind='sphere', center=[float(x) for x in self.center],
                    radius=float(self.radius), albedo=float(self.albedo))


@dataclass
class Box:
    '''Axis-aligned box given by its centre and half extents.'''

    center: np.ndarray
    half: np.ndarray
    albedo: float = 0.8

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half = np.asarray(self.half, dtype=np.float64).reshape(3)

    def intersect(self, origin, dirs):
        safe = np.where(np.abs(dirs) < 1e-12, np.copysign(1e-12, dirs), dirs)
        inv = 1.0 / safe
        t1 = (self.center - self.half - origin) * inv
        t2 = (self.center + self.half - origin) * inv
        near = np.minimum(t1, t2).max(axis=-1)
        far = np.maximum(t1, t2).min(axis=-1)
        hit = far >= np.maximum(near, EPS)
        s = np.where(near > EPS, near, far)
        return np.where(hit, s, np.inf)

    def normal(self, points):
        p = (points - self.center) / self.half
        axis = np.argmax(np.abs(p), axis=-1)
        n = np.zeros_like(points)
        rows = np.arange(len(points))
        n[rows, axis] = np.sign(p[rows, axis])
        return n

    def to_dict(self):
        return dict(kind='box', center=[float(x) for x in self.center],
                    half=[float(x) for x in self.half],
                    albedo=float(self.albedo))


PRIMITIVES = {'sphere': Sphere, 'box': Box}


def primitive_from_dict(data):
    data = dict(data)
    return PRIMITIVES[data.pop('kind')](**data)


@dataclass
class Scene:
    '''Spheres and boxes observed by two or more cameras.'''

    primitives: list
    cameras: List[Camera]
    name: str = 'scene'

    def __post_init__(self):
        if not self.primitives:
            raise ValueError('a scene needs at least one primitive')
        if len(self.cameras) < 2:
            raise ValueError('a scene needs at least two cameras')

    def to_dict(self):
        return dict(
            name=self.name,
            primitives=[p.to_dict() for p in self.primitives],
            cameras=[c.to_dict() for c in self.cameras],
        )

    @classmethod
    def from_dict(cls, data):
        return cls(
            primitives=[primitive_from_dict(p) for p in data['primitives']],
            cameras=[Camera.from_dict(c) for c in data['cameras']],
            name=data['name'],
        )

    def to_json(self):
        '''Deterministic JSON serialization of the scene manifest.'''
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class Pointmap:
    '''Per-pixel world coordinates, NaN where no surface was hit.'''

    values: np.ndarray

    @property
    def valid(self):
        return np.all(np.isfinite(self.values), axis=-1)

    @property
    def shape(self):
        return self.values.shape[:2]


@dataclass
class PluckerGrid:
    '''Per-pixel (unit direction, moment) line coordinates.'''

    values: np.ndarray

    @property
    def directions(self):
        return self.values[..., :3]

    @property
    def moments(self):
        return self.values[..., 3:]


@dataclass
class Hits:
    distance: np.ndarray
    primitive: np.ndarray
    points: np.ndarray
    dirs: np.ndarray
    cam: Camera


def trace(scene, cam_index, res):
    '''Cast one ray per pixel of camera `cam_index` at res = (H, W); the
    nearest primitive hit wins.'''

    h, w = res
    if h < 1 or w < 1:
        raise ValueError('resolution must be at least 1x1')
    cam = scene.cameras[cam_index].scaled(res)
    origin = cam.center
    dirs = cam.pixel_rays().reshape(-1, 3)
    dist = np.stack([p.intersect(origin, dirs) for p in scene.primitives])
    nearest = np.argmin(dist, axis=0)
    s = dist[nearest, np.arange(dirs.shape[0])]
    with np.errstate(invalid='ignore'):
        points = origin + s[:, None] * dirs
    points[~np.isfinite(s)] = np.nan
    nearest[~np.isfinite(s)] = -1
    return Hits(s.reshape(h, w), nearest.reshape(h, w),
                points.reshape(h, w, 3), dirs.reshape(h, w, 3), cam)


def render_pointmap(scene, cam_index, res):
    '''World-space pointmap of a view, all-NaN where nothing is hit.'''

    return Pointmap(trace(scene, cam_index, res).points)


def render_depth(scene, cam_index, res):
    '''Camera-space depth (z) per pixel, inf where nothing is hit.'''

    hits = trace(scene, cam_index, res)
    return hits.distance * (hits.dirs @ hits.cam.R[2])


def render_latent(scene, cam_index, res, channels=4):
    '''Per-pixel appearance of a view: Lambert-shaded albedo followed by
    channels - 1 world-anchored texture channels. Background is 0.'''

    if not 1 <= channels <= 1 + len(TEXTURE_FREQS):
        raise ValueError('channels must be in [1, {}]'.format(
            1 + len(TEXTURE_FREQS)))
    hits = trace(scene, cam_index, res)
    h, w = res
    out = np.zeros((h * w, channels))
    prim = hits.primitive.reshape(-1)
    points = hits.points.reshape(-1, 3)
    for index, primitive in enumerate(scene.primitives):
        rows = np.flatnonzero(prim == index)
        if not len(rows):
            continue
        normals = primitive.normal(points[rows])
        shade = 0.3 + 0.7 * np.maximum(normals @ LIGHT_DIR, 0.0)
        out[rows, 0] = primitive.albedo * shade
        if channels > 1:
            freqs = TEXTURE_FREQS[:channels - 1]
            phases = TEXTURE_PHASES[:channels - 1]
            out[rows, 1:] = 0.5 * np.sin(points[rows] @ freqs.T + phases)
    return out.reshape(h, w, channels)


def plucker_embedding(cam, res):
    '''Plücker coordinates (d, o x d) of every pixel ray at res = (H, W).'''

    cam = cam.scaled(res)
    dirs = cam.pixel_rays()
    moments = np.cross(np.broadcast_to(cam.center, dirs.shape), dirs)
    return PluckerGrid(np.concatenate([dirs, moments], axis=-1))


def relative_rotation_deg(cam_a, cam_b):
    '''Angle of the relative rotation R_a R_b^T in degrees, in [0, 180].'''

    trace_ = np.einsum('ij,ij->', cam_a.R, cam_b.R)
    cos = np.clip((trace_ - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


@dataclass
class SceneSetSpec:
    '''Counts and ranges for generate_scene_set.'''

    scenes: int = 1
    views: int = 2
    spread_deg: float = 120.0
    res: Tuple[int, int] = (64, 64)
    primitives: Tuple[int, int] = (1, 3)
    size: Tuple[float, float] = (0.2, 1.0)
    distance: Tuple[float, float] = (2.3, 2.7)
    elevation_deg: Tuple[float, float] = (-10.0, 35.0)
    jitter_deg: float = 3.0
    fov_deg: float = 35.0
    max_tries: int = 200

    def validate(self):
        if self.views < 2:
            raise SpreadError('a scene needs at least two views')
        if not 0.0 < self.spread_deg <= 180.0:
            raise SpreadError(
                'spread must be in (0, 180], got {}'.format(self.spread_deg)
            )
        if self.scenes < 0:
            raise ValueError('scene count must be >= 0')


def _random_primitive(rng, spec):
    low, high = spec.size
    center = rng.uniform(-0.15, 0.15, size=3)
    albedo = rng.uniform(0.3, 1.0)
    if rng.uniform() < 0.5:
        return Sphere(center, radius=rng.uniform(low, high) / 2.0,
                      albedo=albedo)
    return Box(center, half=rng.uniform(low, high, size=3) / 2.0,
               albedo=albedo)


def _orbit_eye(distance, azimuth_deg, elevation_deg):
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    return distance * np.array([
        math.cos(el) * math.sin(az),
        math.sin(el),
        math.cos(el) * math.cos(az),
    ])


def _random_cameras(rng, spec):
    h, w = spec.res
    base_az = rng.uniform(0.0, 360.0)
    base_el = rng.uniform(*spec.elevation_deg)
    arc = 0.95 * spec.spread_deg
    offsets = np.concatenate([[0.0], rng.uniform(0.0, arc, spec.views - 1)])
    cams = []
    for offset in offsets:
        jitter = min(spec.jitter_deg, 0.02 * spec.spread_deg)
        el = np.clip(base_el + rng.uniform(-jitter, jitter), -80.0, 80.0)
        eye = _orbit_eye(rng.uniform(*spec.distance), base_az + offset, el)
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), fov_deg=spec.fov_deg,
                                   width=w, height=h))
    return cams


def _max_pair_angle(cams):
    return max(
        relative_rotation_deg(a, b)
        for i, a in enumerate(cams) for b in cams[i + 1:]
    )


def generate_scene_set(spec, rng):
    '''Generate object-centric scenes with inward-looking cameras.

    Cameras orbit the origin along an arc no longer than spec.spread_deg,
    so every pairwise relative rotation stays within the spread.

    Arguments:
        spec (SceneSetSpec): counts and ranges
        rng (numpy.random.Generator): see tensors.make_rng

    Returns:
        list of Scene
    '''

    spec.validate()
    scenes = []
    for index in range(spec.scenes):
        count = rng.integers(spec.primitives[0], spec.primitives[1] + 1)
        primitives = [_random_primitive(rng, spec) for _ in range(count)]
        for attempt in range(spec.max_tries):
            cams = _random_cameras(rng, spec)
            if _max_pair_angle(cams) <= spec.spread_deg:
                break
        else:
            raise SpreadError(
                'no camera layout within {} deg after {} tries'.format(
                    spec.spread_deg, spec.max_tries)
            )
        scenes.append(Scene(primitives, cams, name='scene_{:04d}'.format(index)))
    log.debug('Generated %d scenes', len(scenes))
    return scenes
