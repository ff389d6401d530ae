"""Independent reference computations shared by the unit and acceptance tests.

Nothing here calls the package's own math for the quantity being checked.
"""
import math

import numpy as np


def quat_matrix(q):
    w, x, y, z = q
    n = math.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def homogeneous(R=np.eye(3), p=(0, 0, 0)):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p
    return T


def rodrigues(axis, angle):
    k = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def oracle_fk(m, q, mount=np.eye(4)):
    lo, hi = m.limits()
    q = np.clip(q, lo, hi)
    frames = [mount]
    for i in range(1, m.n_links):
        j = m.joints[i - 1]
        T = frames[m.links[i].parent] @ homogeneous(quat_matrix(j.origin_quat), j.origin_pos)
        if j.kind == "revolute":
            T = T @ homogeneous(rodrigues(j.axis, q[i - 1]))
        elif j.kind == "prismatic":
            T = T @ homogeneous(p=np.asarray(j.axis) * q[i - 1])
        frames.append(T)
    return [F @ homogeneous(quat_matrix(l.origin_quat), l.origin_pos) for F, l in zip(frames, m.links)]


def gae_oracle(rewards, values, next_values, terminated, done, gamma, lam):
    """Advantages by direct summation of (gamma * lam)^k * delta_{t+k} up to the episode end."""
    T, N = np.shape(rewards)
    adv = np.zeros((T, N))
    for n in range(N):
        for t in range(T):
            total, k = 0.0, 0
            while t + k < T:
                s = t + k
                boot = 0.0 if terminated[s, n] else gamma * next_values[s, n]
                delta = rewards[s, n] + boot - values[s, n]
                total += (gamma * lam) ** k * delta
                if done[s, n]:
                    break
                k += 1
            adv[t, n] = total
    return adv


def fd_gradient_errors(loss_fn, params, coords, eps=1e-5):
    """Relative error between autograd and central differences at ``coords``.

    ``coords`` is a list of (param index, flat element index); ``loss_fn()``
    returns a scalar tensor. Returns an array of relative errors with an
    absolute floor so exactly-zero gradients compare cleanly.
    """
    import torch

    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    errs = []
    with torch.no_grad():
        for i, j in coords:
            flat = params[i].view(-1)
            old = flat[j].item()
            flat[j] = old + eps
            up = loss_fn().item()
            flat[j] = old - eps
            down = loss_fn().item()
            flat[j] = old
            num = (up - down) / (2 * eps)
            ana = analytic[i].view(-1)[j].item()
            errs.append(abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return np.array(errs)


def sweep_extension(stick, block_xy, mount_xy):
    """Prismatic extension that puts the stick's middle on the block's radius."""
    ell = 2 * stick.links[2].geometry.params[0]
    r0 = np.linalg.norm(np.asarray(block_xy) - np.asarray(mount_xy))
    return float(np.clip(r0 - 0.10 - ell / 2, 0.0, 0.3))


def sweep_action(q, target_ext):
    """Extend to ``target_ext`` first, then rotate the turret (which carries the block towards +y)."""
    a = np.zeros(2)
    if abs(q[1] - target_ext) > 1e-9:
        a[1] = np.clip(target_ext - q[1], -0.02, 0.02)
    else:
        a[0] = 0.05
    return a


def scripted_push_episode(env):
    """Run one scripted sweep episode on a stick morphology; returns the last StepResult."""
    state, _ = env.reset()
    ext = sweep_extension(env.lanes.m, state.block[:2], env.cfg.mount_pos[:2])
    while True:
        res = env.step(sweep_action(env.state.q, ext))
        if res.terminated or res.truncated:
            return res
