"""Self-describing checkpoint container shared by training, attacks, and the CLI.

Format (``torch.save`` of a plain dict):

    {
      "format": "diffadv-checkpoint-v1",
      "kind":   "autoencoder" | "classifier" | "teacher" | "student" | "discriminator",
      "arch":   constructor arguments for the wrapped nets,
      "state":  state dict (or dict of state dicts for the autoencoder),
      "schedule":  NoiseSchedule.to_dict() for diffusion models,
      "t_student": student timestep list (student only),
    }
"""

from __future__ import annotations

from pathlib import Path

import torch

from .distill import StudentModel, TeacherModel
from .models import CLASSIFIER_ARCHS, Autoencoder, ConvDecoder, ConvEncoder, Discriminator, EpsNet
from .schedule import NoiseSchedule

FORMAT = "diffadv-checkpoint-v1"


def _write(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload["format"] = FORMAT
    torch.save(payload, path)
    return path


def _read(path: str | Path, kind: str) -> dict:
    payload = torch.load(Path(path), weights_only=False)
    if payload.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} checkpoint")
    if payload.get("kind") != kind:
        raise ValueError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    return payload


def save_autoencoder(path, ae: Autoencoder) -> Path:
    if ae.identity:
        return _write(path, {"kind": "autoencoder", "arch": {"identity": True}, "state": {}})
    return _write(
        path,
        {
            "kind": "autoencoder",
            "arch": {"identity": False, "latent_hw": ae.latent_hw, "latent_scale": ae.latent_scale},
            "state": {"encoder": ae.encoder.state_dict(), "decoder": ae.decoder.state_dict()},
        },
    )


def load_autoencoder(path) -> Autoencoder:
    p = _read(path, "autoencoder")
    if p["arch"].get("identity"):
        return Autoencoder.identity_mode()
    ae = Autoencoder(
        ConvEncoder(), ConvDecoder(), latent_hw=p["arch"]["latent_hw"], latent_scale=p["arch"].get("latent_scale", 1.0)
    )
    ae.encoder.load_state_dict(p["state"]["encoder"])
    ae.decoder.load_state_dict(p["state"]["decoder"])
    return ae.eval_()


def save_classifier(path, arch: str, net) -> Path:
    return _write(
        path,
        {
            "kind": "classifier",
            "arch": {"name": arch, "num_classes": net.head[-1].out_features if arch == "cnn_b" else net.head.out_features},
            "state": net.state_dict(),
        },
    )


def load_classifier(path):
    p = _read(path, "classifier")
    net = CLASSIFIER_ARCHS[p["arch"]["name"]](num_classes=p["arch"]["num_classes"])
    net.load_state_dict(p["state"])
    net.eval()
    return net


def _eps_arch(net: EpsNet) -> dict:
    return {
        "channels": net.conv_in.out_channels,
        "cond_dim": net.cond_dim,
        "num_classes": net.num_classes,
        "emb_dim": net.emb_dim,
    }


def save_teacher(path, teacher: TeacherModel) -> Path:
    return _write(
        path,
        {
            "kind": "teacher",
            "arch": _eps_arch(teacher.net),
            "state": teacher.net.state_dict(),
            "schedule": teacher.schedule.to_dict(),
        },
    )


def load_teacher(path) -> TeacherModel:
    p = _read(path, "teacher")
    net = EpsNet(**p["arch"])
    net.load_state_dict(p["state"])
    return TeacherModel(net, NoiseSchedule.from_dict(p["schedule"])).freeze()


def save_student(path, student: StudentModel) -> Path:
    return _write(
        path,
        {
            "kind": "student",
            "arch": _eps_arch(student.net),
            "state": student.net.state_dict(),
            "schedule": student.schedule.to_dict(),
            "t_student": list(student.t_student),
        },
    )


def load_student(path) -> StudentModel:
    p = _read(path, "student")
    net = EpsNet(**p["arch"])
    net.load_state_dict(p["state"])
    net.eval()
    return StudentModel(net, NoiseSchedule.from_dict(p["schedule"]), tuple(p["t_student"]))


def save_discriminator(path, disc: Discriminator) -> Path:
    return _write(
        path,
        {
            "kind": "discriminator",
            "arch": {"channels": disc.head.in_features, "num_classes": disc.num_classes},
            "state": disc.state_dict(),
        },
    )


def load_discriminator(path) -> Discriminator:
    p = _read(path, "discriminator")
    d = Discriminator(channels=p["arch"]["channels"], num_classes=p["arch"].get("num_classes", 4))
    d.load_state_dict(p["state"])
    d.eval()
    return d
