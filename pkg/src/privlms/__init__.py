"""Privacy-aware adapt-then-project LMS over multitask networks."""
