"""
Similarity distributions and the two losses
===========================================

A query is scored against its positive key and K bank entries. The softmax
over those K + 1 similarities is the distribution both losses act on.
"""
import math

import torch
import torch.nn.functional as F

from clsa.losses import conditional_distribution, contrastive_loss, ddm_loss

# a hand-made case: the positive at cosine 1, two negatives at cosine 0
e = torch.eye(3, dtype=torch.float64)
dist = conditional_distribution(e[:1], e[:1], e[1:], tau=0.2)
print("probabilities", dist.probs.numpy().round(5))
print("L_C", contrastive_loss(e[:1], e[:1], e[1:], tau=0.2).item(), "=", math.log(1 + 2 * math.exp(-5)))

# random embeddings: weak query, strong query, key, bank
g = torch.Generator().manual_seed(0)
weak, strong, key = (F.normalize(torch.randn(8, 16, generator=g, dtype=torch.float64), dim=1) for _ in range(3))
bank = F.normalize(torch.randn(64, 16, generator=g, dtype=torch.float64), dim=1)

p = conditional_distribution(weak, key, bank, 0.2)
q = conditional_distribution(strong, key, bank, 0.2)

# the distribution loss is a cross-entropy, so it splits into entropy plus KL
entropy = -(p.probs * p.log_probs).sum(1).mean()
kl = (p.probs * (p.log_probs - q.log_probs)).sum(1).mean()
print("L_D", ddm_loss(p, q).item(), "H + KL", (entropy + kl).item())

# with a one-hot target it is the ordinary contrastive loss of the strong query
one_hot = torch.zeros_like(q.probs)
one_hot[:, 0] = 1
print("one-hot L_D", ddm_loss(one_hot, q).item(), "L_C(strong)", contrastive_loss(strong, key, bank, 0.2).item())

# no gradient reaches the weak query through L_D
weak.requires_grad_(True)
strong.requires_grad_(True)
loss = ddm_loss(conditional_distribution(weak, key, bank, 0.2), conditional_distribution(strong, key, bank, 0.2))
loss.backward()
print("grad on weak", weak.grad, "grad norm on strong", strong.grad.norm().item())
