"""Network definitions: CAM classifier, IRNet-style branch heads, and a
DeepLabv3+-style segmenter. The ``tiny*`` variants are CPU-sized stand-ins;
``vgg16`` / ``resnet50`` / ``resnet101`` build the full-size architectures
and accept externally supplied weights.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_bn(cin, cout, k=3, stride=1, dilation=1):
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinyTrunk(nn.Module):
    """Three stages at strides 1, 2, 4; exposes every stage output."""

    def __init__(self, width=16):
        super().__init__()
        w = width
        self.stage1 = conv_bn(3, w)
        self.stage2 = nn.Sequential(nn.MaxPool2d(2), conv_bn(w, 2 * w), conv_bn(2 * w, 2 * w))
        self.stage3 = nn.Sequential(nn.MaxPool2d(2), conv_bn(2 * w, 4 * w), conv_bn(4 * w, 4 * w))
        self.channels = (w, 2 * w, 4 * w)
        self.stride = 4

    def forward(self, x):
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        return [f1, f2, f3]


class VGGTrunk(nn.Module):
    """VGG16 conv1_1..conv5_3 with the last pooling removed (stride 16)."""

    def __init__(self, weights_path=None):
        super().__init__()
        from torchvision.models import vgg16

        feats = vgg16(weights=None).features
        if weights_path:
            sd = torch.load(weights_path, map_location="cpu")
            sd = {k[len("features."):]: v for k, v in sd.items() if k.startswith("features.")}
            feats.load_state_dict(sd)
        layers = list(feats.children())[:-1]
        # split after pool2, pool3 and conv5_3 so IRNet heads get several levels
        self.stage1 = nn.Sequential(*layers[:10])
        self.stage2 = nn.Sequential(*layers[10:17])
        self.stage3 = nn.Sequential(*layers[17:])
        self.channels = (128, 256, 512)
        self.stride = 16

    def forward(self, x):
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        return [f1, f2, f3]


class CamClassifier(nn.Module):
    """Trunk plus appended convolutions whose last layer is a 1x1 conv emitting
    one score map per class; logits are the spatial mean of those maps.
    ``head_kernel`` sets the kernel of the other appended convs; 1 keeps the
    receptive field of the score maps equal to the trunk's."""

    def __init__(self, num_outputs, backbone="tiny", extra_convs=4, width=16, weights_path=None,
                 head_kernel=3):
        super().__init__()
        if extra_convs < 1:
            raise ValueError("need at least the final 1x1 scoring conv")
        if backbone == "tiny":
            self.trunk = TinyTrunk(width)
        elif backbone == "vgg16":
            self.trunk = VGGTrunk(weights_path)
        else:
            raise ValueError(f"unknown classifier backbone {backbone!r}")
        c = self.trunk.channels[-1]
        mid = min(c, 256)
        layers = []
        for _ in range(extra_convs - 1):
            layers.append(conv_bn(c, mid, k=head_kernel))
            c = mid
        layers.append(nn.Conv2d(c, num_outputs, 1))
        self.head = nn.Sequential(*layers)
        self.num_outputs = num_outputs

    def score_maps(self, x):
        return self.head(self.trunk(x)[-1])

    def forward(self, x):
        return self.score_maps(x).mean(dim=(2, 3))


class BoundaryDisplacementHeads(nn.Module):
    """Two branches over concatenated multi-level trunk activations, both at the
    trunk's output stride: a sigmoid class-boundary map and a 2-channel
    displacement field (in output-stride pixels)."""

    def __init__(self, trunk_channels, mid=16):
        super().__init__()
        groups = 4 if mid % 4 == 0 else 1
        k = len(trunk_channels)

        def branch_in():
            return nn.ModuleList(nn.Sequential(nn.Conv2d(c, mid, 1, bias=False),
                                               nn.GroupNorm(groups, mid)) for c in trunk_channels)

        self.edge_in = branch_in()
        self.edge_out = nn.Sequential(
            nn.ReLU(inplace=True),
            nn.Conv2d(mid * k, mid, 3, padding=1, bias=False),
            nn.GroupNorm(groups, mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, 1, 1),
        )
        self.disp_in = branch_in()
        self.disp_out = nn.Sequential(
            nn.ReLU(inplace=True),
            nn.Conv2d(mid * k, 2 * mid, 3, padding=1, bias=False),
            nn.GroupNorm(groups, 2 * mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * mid, 2, 1),
        )

    @staticmethod
    def _gather(convs, feats):
        size = feats[-1].shape[2:]
        outs = []
        for conv, f in zip(convs, feats):
            if f.shape[2:] != size:
                f = F.adaptive_avg_pool2d(f, size)
            outs.append(conv(f))
        return torch.cat(outs, 1)

    def boundary_parameters(self):
        return list(self.edge_in.parameters()) + list(self.edge_out.parameters())

    def displacement_parameters(self):
        return list(self.disp_in.parameters()) + list(self.disp_out.parameters())

    def forward(self, feats):
        edge = torch.sigmoid(self.edge_out(self._gather(self.edge_in, feats)))[:, 0]
        disp = self.disp_out(self._gather(self.disp_in, feats))
        return edge, disp


# ---------------------------------------------------------------------------
# segmentation

class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                      nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


class TinyResEncoder(nn.Module):
    """Residual trunk at strides 2, 4 and a last stage whose stride is
    replaced by dilation when ``dilate`` is set."""

    def __init__(self, width=32, blocks=1, dilate=True):
        super().__init__()
        w = width
        self.stem = conv_bn(3, w)

        def stage(cin, cout, stride, dil):
            layers = [BasicBlock(cin, cout, stride, dil)]
            layers += [BasicBlock(cout, cout, 1, dil) for _ in range(blocks - 1)]
            return nn.Sequential(*layers)

        self.layer1 = stage(w, w, 2, 1)
        self.layer2 = stage(w, 2 * w, 2, 1)
        self.layer3 = stage(2 * w, 2 * w, 1, 2) if dilate else stage(2 * w, 2 * w, 2, 1)
        self.low_channels = w
        self.high_channels = 2 * w
        self.output_stride = 4 if dilate else 8

    def forward(self, x):
        low = self.layer1(self.stem(x))
        return low, self.layer3(self.layer2(low))


class ResNetEncoder(nn.Module):
    def __init__(self, depth=50, weights_path=None, dilate=True):
        super().__init__()
        from torchvision.models import resnet50, resnet101

        net = (resnet50 if depth == 50 else resnet101)(
            weights=None, replace_stride_with_dilation=[False, False, dilate])
        if weights_path:
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = (
            net.layer1, net.layer2, net.layer3, net.layer4)
        self.low_channels = 256
        self.high_channels = 2048
        self.output_stride = 16 if dilate else 32

    def forward(self, x):
        low = self.layer1(self.stem(x))
        return low, self.layer4(self.layer3(self.layer2(low)))


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates):
        super().__init__()
        self.branches = nn.ModuleList(
            [conv_bn(cin, cout, 1)] + [conv_bn(cin, cout, 3, dilation=r) for r in rates])
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = conv_bn(cout * (len(rates) + 2), cout, 1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, *x.shape[2:]))
        return self.project(torch.cat(outs, 1))


class DeepLabV3Plus(nn.Module):
    def __init__(self, num_classes, encoder="tiny_res", dilate=True, weights_path=None):
        super().__init__()
        if encoder in ("tiny_res", "tiny_res_deep"):
            self.encoder = TinyResEncoder(blocks=1 if encoder == "tiny_res" else 2, dilate=dilate)
            mid, low_mid, rates = 64, 16, (2, 4)
        elif encoder in ("resnet50", "resnet101"):
            self.encoder = ResNetEncoder(50 if encoder == "resnet50" else 101, weights_path, dilate)
            mid, low_mid, rates = 256, 48, (6, 12, 18)
        else:
            raise ValueError(f"unknown segmentation encoder {encoder!r}")
        self.aspp = ASPP(self.encoder.high_channels, mid, rates)
        self.low_proj = conv_bn(self.encoder.low_channels, low_mid, 1)
        self.decoder = nn.Sequential(conv_bn(mid + low_mid, mid), nn.Conv2d(mid, num_classes, 1))
        self.stride = self.encoder.output_stride

    def forward(self, x):
        size = x.shape[2:]
        low, high = self.encoder(x)
        high = F.interpolate(self.aspp(high), size=low.shape[2:], mode="bilinear", align_corners=False)
        out = self.decoder(torch.cat([high, self.low_proj(low)], 1))
        return F.interpolate(out, size=size, mode="bilinear", align_corners=False)
