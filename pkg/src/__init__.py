# utap-lab package
