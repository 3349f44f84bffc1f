# Eval package
