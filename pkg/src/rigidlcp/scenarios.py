"""Named benchmark scenes built on ``rigidsim``."""

from __future__ import annotations

import itertools

import numpy as np

from .rigidsim import (
    Box,
    MultibodySystem,
    Plane,
    RigidBody,
    Sphere,
    SphericalJoint,
    quat_from_rotvec,
)

GRAVITY = 9.81


def grasp(push: float = 50.0, duplication: int = 3, mu_v: float = 0.0, mu_c: float = 100.0,
          seed: int = 0) -> MultibodySystem:
    """Two grippers squeeze two boxes in a row and hold them against gravity.

    The grippers are larger than the boxes and the two held boxes differ
    slightly in size, so every touching face pair yields four well separated
    corner contacts (12 in total before duplication).
    """
    g_half = (0.5, 0.75, 0.75)
    a_half = (0.5, 0.5, 0.5)
    b_half = (0.5, 0.45, 0.45)
    m_grip, m_box = 2.0, 1.0
    lift = (m_grip + m_box) * GRAVITY  # gripper weight plus half the payload
    bodies = [
        RigidBody.box(m_grip, g_half, position=(-1.5, 0, 1), force=(push, 0, lift), name="gripper-left"),
        RigidBody.box(m_box, a_half, position=(-0.5, 0, 1), name="box-a"),
        RigidBody.box(m_box, b_half, position=(0.5, 0, 1), name="box-b"),
        RigidBody.box(m_grip, g_half, position=(1.5, 0, 1), force=(-push, 0, lift), name="gripper-right"),
    ]
    geoms = [Box(0, g_half), Box(1, a_half), Box(2, b_half), Box(3, g_half)]
    return MultibodySystem(bodies, geoms, gravity=(0, 0, -GRAVITY), mu_v=mu_v, mu_c=mu_c,
                           contact_duplication=duplication)


def stack(mu_v: float = 0.0, mu_c: float = 100.0, seed: int = 0) -> MultibodySystem:
    """Two equal unit cubes stacked on the ground (coincident faces)."""
    h = (0.5, 0.5, 0.5)
    bodies = [RigidBody.box(1.0, h, position=(0, 0, 0.5)), RigidBody.box(1.0, h, position=(0, 0, 1.5))]
    geoms = [Plane(), Box(0, h), Box(1, h)]
    return MultibodySystem(bodies, geoms, gravity=(0, 0, -GRAVITY), mu_v=mu_v, mu_c=mu_c)


def incline_slide(angle_deg: float = 30.0, speed: float = 0.0, mu_v: float = 0.0, mu_c: float = 100.0,
                  seed: int = 0) -> MultibodySystem:
    """A cube resting on a tilted plane, optionally given a down-slope speed."""
    th = np.radians(angle_deg)
    n = np.array([np.sin(th), 0.0, np.cos(th)])
    down = np.array([np.cos(th), 0.0, -np.sin(th)])
    h = (0.5, 0.5, 0.5)
    body = RigidBody.box(1.0, h, position=0.5 * n, orientation=quat_from_rotvec([0, th, 0]),
                         velocity=speed * down)
    return MultibodySystem([body], [Plane(tuple(n), 0.0), Box(0, h)], gravity=(0, 0, -GRAVITY),
                           mu_v=mu_v, mu_c=mu_c)


def particle_impact(seed: int = 0, mu_v: float = 0.0, mu_c: float = 100.0) -> MultibodySystem:
    """A point mass on the ground plane moving into it with a random velocity."""
    rng = np.random.default_rng(seed)
    v = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), -rng.uniform(0.5, 2.0)])
    body = RigidBody.sphere(1.0, 0.0, velocity=v)
    return MultibodySystem([body], [Plane(), Sphere(0, 0.0)], gravity=(0, 0, -GRAVITY), mu_v=mu_v, mu_c=mu_c)


def random_impact(seed: int = 0) -> MultibodySystem:
    """A tilted cube with one vertex touching the ground and a random velocity."""
    rng = np.random.default_rng(seed)
    h = tuple(rng.uniform(0.2, 0.8, 3))
    rv = rng.normal(size=3)
    q = quat_from_rotvec(rv * rng.uniform(0.0, np.pi) / np.linalg.norm(rv))
    body = RigidBody.box(rng.uniform(0.5, 2.0), h, orientation=q,
                         velocity=rng.normal(size=3), angular_velocity=rng.normal(size=3))
    corners = np.array(list(itertools.product((-1.0, 1.0), repeat=3))) * h
    lowest = (corners @ body.rotation().T)[:, 2].min()
    body.position = np.array([0.0, 0.0, -lowest])
    body.velocity[2] = -abs(body.velocity[2]) - 0.1
    return MultibodySystem([body], [Plane(), Box(0, h)], gravity=(0, 0, -GRAVITY))


def scaling_box(duplication: int = 1, mu_c: float = 100.0, seed: int = 0) -> MultibodySystem:
    """A cube resting on the ground with every contact repeated ``duplication`` times."""
    h = (0.5, 0.5, 0.5)
    body = RigidBody.box(1.0, h, position=(0, 0, 0.5), velocity=(0.1, 0.05, 0.0))
    return MultibodySystem([body], [Plane(), Box(0, h)], gravity=(0, 0, -GRAVITY), mu_c=mu_c,
                           contact_duplication=duplication)


def jointed_pair(seed: int = 0, mu_c: float = 100.0) -> MultibodySystem:
    """Two cubes on the ground linked by a spherical joint at their shared edge."""
    rng = np.random.default_rng(seed)
    h = (0.5, 0.5, 0.5)
    bodies = [
        RigidBody.box(1.0, h, position=(-0.6, 0, 0.5), velocity=rng.normal(scale=0.3, size=3)),
        RigidBody.box(1.0, h, position=(0.6, 0, 0.5)),
    ]
    joint = SphericalJoint(0, (0.6, 0.0, 0.5), 1, (-0.6, 0.0, 0.5))
    return MultibodySystem(bodies, [Plane(), Box(0, h), Box(1, h)], [joint], gravity=(0, 0, -GRAVITY), mu_c=mu_c)


SCENARIOS = {
    "grasp": grasp,
    "stack": stack,
    "incline-slide": incline_slide,
    "particle-impact": particle_impact,
    "scaling-sweep": scaling_box,
    "jointed-pair": jointed_pair,
}
