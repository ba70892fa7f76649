from ualign.oracles import central_diff, rel_err

__all__ = ["central_diff", "rel_err"]
