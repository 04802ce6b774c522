"""M(t)/GI/1 self-averaging laboratory."""
