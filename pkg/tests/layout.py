"""Structural skeleton of a results tree, used for the golden layout file."""


def skeleton(obj):
    if isinstance(obj, dict):
        return {k: skeleton(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [skeleton(obj[0])] if obj else []
    if obj is None:
        return "null"
    return type(obj).__name__


def tree_layout(tree):
    return {rel: skeleton(payload) for rel, payload in tree.files()}
