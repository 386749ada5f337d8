"""Template recovery losses and the fused real/fake decision."""
import json

import torch

from .image import resize_bilinear
from .metrics import cosine_similarity

BCE_EPS = 1e-7
THRESHOLD = 0.5


def _as_batch(x):
    return x.unsqueeze(0) if x.dim() == 2 else x.reshape(-1, *x.shape[-2:])


def recovery_loss(recovered, templates, added_idx, is_encrypted, lam8, lam9):
    """Template recovery objective averaged over the batch.

    Encrypted samples pull the recovered template towards the one that was added
    (``lam8 * (1 - CS)``); manipulated samples push it away from every template
    in the set (``lam9 * sum_i CS(S_i, S_R)``).
    """
    sr = _as_batch(recovered)
    s = templates
    if s.dim() == 2:
        s = s.unsqueeze(0)
    if sr.shape[-2:] != s.shape[-2:]:
        raise ValueError(f"recovered shape {tuple(sr.shape[-2:])} differs from template shape {tuple(s.shape[-2:])}")
    b, n = sr.shape[0], s.shape[0]
    idx = torch.as_tensor(added_idx, dtype=torch.long, device=sr.device).expand(b)
    enc = torch.as_tensor(is_encrypted, dtype=torch.bool, device=sr.device).expand(b)

    # (B, n) similarity of every recovered template against every template
    cs_all = cosine_similarity(sr.unsqueeze(1).expand(b, n, *sr.shape[-2:]).reshape(b * n, -1),
                               s.unsqueeze(0).expand(b, n, *s.shape[-2:]).reshape(b * n, -1)).view(b, n)
    cs_added = cs_all.gather(1, idx.view(-1, 1)).squeeze(1)
    loss = torch.where(enc, lam8 * (1 - cs_added), lam9 * cs_all.sum(1))
    return loss.mean()


def fused_score(classifier_logit, cs_recovered):
    """Mean of the classifier probability and the (non-negative) recovery CS."""
    logit = torch.as_tensor(classifier_logit)
    cs = torch.as_tensor(cs_recovered, dtype=logit.dtype)
    return (torch.sigmoid(logit) + cs.clamp(0.0, 1.0)) / 2


def fused_bce(score, label, lam10, eps=BCE_EPS):
    score = torch.as_tensor(score).clamp(eps, 1 - eps)
    y = torch.as_tensor(label, dtype=score.dtype)
    bce = -(y * torch.log(score) + (1 - y) * torch.log(1 - score))
    return lam10 * bce.mean()


def recovered_similarity(recovered, templates, added_idx=None):
    """CS between recovered templates and the set.

    With ``added_idx`` the similarity to that template is returned, otherwise the
    best match over the set (what a defender can compute without knowing the index).
    """
    sr = _as_batch(recovered)
    s = templates
    if tuple(s.shape[-2:]) != tuple(sr.shape[-2:]):
        s = resize_bilinear(s.unsqueeze(1), *sr.shape[-2:]).squeeze(1)
    cs = torch.stack([cosine_similarity(sr, s[i].expand_as(sr)) for i in range(s.shape[0])], dim=1)
    if added_idx is None:
        return cs.max(dim=1).values
    idx = torch.as_tensor(added_idx, dtype=torch.long, device=sr.device).expand(sr.shape[0])
    return cs.gather(1, idx.view(-1, 1)).squeeze(1)


@torch.no_grad()
def detect(images, model, ids=None, threshold=THRESHOLD):
    """Fused decision for a batch of images; encrypted (real) is the positive class.

    ``model`` is a trained :class:`malp.model.MaLP`. Returns one record per image
    with keys id, score, label, cs_recovered, classifier_prob.
    """
    if not getattr(model, "trained", False):
        raise RuntimeError("detect() needs trained networks; load a checkpoint first")
    model.eval()
    out = model.infer(images)
    cs = recovered_similarity(out["recovered"], model.templates.templates)
    prob = torch.sigmoid(out["logit"])
    score = fused_score(out["logit"], cs)
    ids = ids or [str(i) for i in range(images.shape[0])]
    records = []
    for i, ident in enumerate(ids):
        records.append({
            "id": ident,
            "score": float(score[i]),
            "label": "real" if float(score[i]) >= threshold else "fake",
            "cs_recovered": float(cs[i]),
            "classifier_prob": float(prob[i]),
        })
    return records


def records_to_jsonl(records):
    return "\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n"
