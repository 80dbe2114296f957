"""Exponential-moving-average teacher.

The teacher holds plain numpy copies of the student parameters, so it can
never accumulate gradients by construction.  After every optimizer step::

    teacher = eps * teacher + (1 - eps) * student

which aggregates the student trajectory; together with the recurrent
layer-aggregation blocks inside the backbone this smooths both across time
and across depth.  Inference always runs under no_grad.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .model import DEFAULT_ARCH, decode, forward

EMA_EPSILON = 0.99


@dataclasses.dataclass
class TeacherState:
    params: dict          # name -> numpy array, same tree as the student
    updates: int = 0

    def copy(self):
        return TeacherState({k: v.copy() for k, v in self.params.items()}, self.updates)


def init_teacher(student_params):
    """Teacher starts as an exact detached copy of the student."""
    return TeacherState({k: v.data.copy() for k, v in student_params.items()}, updates=0)


def ema_update(teacher: TeacherState, student_params, eps=EMA_EPSILON):
    """In-place EMA fold of one student snapshot; returns the teacher."""
    if not (0.0 <= eps < 1.0):
        raise ValueError(f"ema epsilon must lie in [0, 1), got {eps}")
    tkeys, skeys = set(teacher.params), set(student_params)
    if tkeys != skeys:
        extra = sorted(tkeys ^ skeys)
        raise ValueError(f"teacher/student parameter trees differ at: {', '.join(extra)}")
    for k, tv in teacher.params.items():
        sv = student_params[k].data
        if tv.shape != sv.shape:
            raise ValueError(f"parameter {k}: teacher {tv.shape} vs student {sv.shape}")
        tv *= eps
        tv += (1.0 - eps) * sv
    teacher.updates += 1
    return teacher


def teacher_forward(teacher: TeacherState, images, arch=DEFAULT_ARCH, use_rla=True):
    """Raw head outputs from the teacher weights, graph-free."""
    with T.no_grad():
        params = {k: T.Tensor(v) for k, v in teacher.params.items()}
        return forward(np.ascontiguousarray(images), params, arch, use_rla=use_rla)


def teacher_infer(teacher: TeacherState, images, geometry, arch=DEFAULT_ARCH,
                  score_thresh=0.05, nms_iou=0.5, max_dets=50, use_rla=True):
    """Decoded teacher detections per image (candidates for pseudo-labels)."""
    out = teacher_forward(teacher, images, arch, use_rla=use_rla)
    return decode(out, geometry, score_thresh=score_thresh, nms_iou=nms_iou,
                  max_dets=max_dets)
